"""Categorical value distributions on a fixed support and the critic losses.

The critic predicts a probability vector over evenly spaced value bins.
Bootstrapped targets shift the bins by the reward and the discounted
entropy bonus, then project the shifted atoms back onto the fixed support
by splitting each atom's mass linearly between its two nearest bins.  Twin
heads are aggregated by averaging their next-state distributions before
projection.  A plain scalar squared-residual mode is kept alongside for
ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor

ENTROPY_PENALTY_WEIGHT = 0.005


@dataclass(frozen=True)
class ValueSupport:
    """Evenly spaced bin values z_0 < ... < z_{B-1}, shared by all heads."""

    v_min: float
    v_max: float
    n_atoms: int = 51

    def __post_init__(self):
        if self.n_atoms < 2:
            raise ValueError("support needs at least 2 atoms")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must lie strictly below v_max")
        atoms = np.linspace(self.v_min, self.v_max, self.n_atoms)
        atoms.flags.writeable = False
        object.__setattr__(self, "_atoms", atoms)
        object.__setattr__(self, "_atoms_tensor", Tensor(atoms))

    @property
    def atoms(self) -> np.ndarray:
        return self._atoms

    def atoms_as_tensor(self) -> Tensor:
        return self._atoms_tensor

    @property
    def bin_width(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @classmethod
    def from_reward_bounds(
        cls, r_min: float, r_max: float, gamma: float, n_atoms: int = 51
    ) -> "ValueSupport":
        """Bound the achievable discounted return by r/(1-gamma) on each side."""
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not r_min < r_max:
            raise ValueError("reward bounds must satisfy r_min < r_max")
        scale = 1.0 / (1.0 - gamma)
        return cls(v_min=r_min * scale, v_max=r_max * scale, n_atoms=n_atoms)


def probabilities_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array, shifted for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def project_onto_support(
    atom_values: np.ndarray, atom_probs: np.ndarray, support: ValueSupport
) -> np.ndarray:
    """Project atoms (values, masses) onto the support's bins.

    Each atom is clipped into [v_min, v_max] and its mass split between the
    two neighboring bins in proportion to proximity.  Accepts a single atom
    row or a batch of rows; each row is projected independently.
    """
    values = np.asarray(atom_values, dtype=np.float64)
    probs = np.asarray(atom_probs, dtype=np.float64)
    if values.shape != probs.shape:
        raise ValueError(
            f"atom values {values.shape} and masses {probs.shape} must match"
        )
    single_row = values.ndim == 1
    values = np.atleast_2d(values)
    probs = np.atleast_2d(probs)

    n_bins = support.n_atoms
    pos = (np.clip(values, support.v_min, support.v_max) - support.v_min)
    pos = np.clip(pos / support.bin_width, 0.0, n_bins - 1.0)
    low = np.floor(pos).astype(np.intp)
    # keep low+1 a valid index; atoms at v_max then carry fraction 1.0
    np.minimum(low, n_bins - 2, out=low)
    frac = pos - low

    out = np.zeros((values.shape[0], n_bins))
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    np.add.at(out, (rows, low.ravel()), (probs * (1.0 - frac)).ravel())
    np.add.at(out, (rows, low.ravel() + 1), (probs * frac).ravel())
    return out[0] if single_row else out


def _average_heads(dist) -> np.ndarray:
    if isinstance(dist, (list, tuple)):
        stacked = np.stack([np.asarray(d, dtype=np.float64) for d in dist])
        return stacked.mean(axis=0)
    return np.asarray(dist, dtype=np.float64)


def bellman_target(
    rewards,
    dones,
    gamma: float,
    alpha: float,
    next_dist,
    next_entropy,
    support: ValueSupport,
) -> np.ndarray:
    """Projected categorical target for one transition batch.

    Atom i of the next-state distribution moves to
    ``r + (1 - done) * gamma * (z_i + alpha * next_entropy)`` before
    projection.  ``next_dist`` may be one probability array of shape
    (batch, B) or a sequence of per-head arrays, which are averaged.
    Targets are plain arrays; no gradient flows through them.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    probs = np.atleast_2d(_average_heads(next_dist))
    batch = probs.shape[0]
    rewards = np.broadcast_to(np.asarray(rewards, dtype=np.float64), (batch,))
    dones = np.broadcast_to(np.asarray(dones, dtype=np.float64), (batch,))
    next_entropy = np.broadcast_to(
        np.asarray(next_entropy, dtype=np.float64), (batch,)
    )
    shifted = rewards[:, None] + (1.0 - dones[:, None]) * gamma * (
        support.atoms[None, :] + alpha * next_entropy[:, None]
    )
    return project_onto_support(shifted, probs, support)


def q_mean(probs, support: ValueSupport):
    """Expectation of the value distribution, Σ_i q_i z_i."""
    return np.asarray(probs, dtype=np.float64) @ support.atoms


def q_from_logits(logits: Tensor, support: ValueSupport) -> Tensor:
    """Differentiable distribution mean straight from critic logits."""
    log_probs = logits.log_softmax(axis=-1)
    return (log_probs.exp() * support.atoms_as_tensor()).sum(axis=-1)


def critic_loss(pred_logits, target_dist, entropy_weight: float = ENTROPY_PENALTY_WEIGHT) -> Tensor:
    """Cross-entropy to the target plus a small penalty on prediction entropy.

    ``pred_logits`` is one (batch, B) logits tensor or a sequence of them,
    one per twin head; the loss is averaged over batch and heads.  The
    target must be gradient-free.
    """
    heads = pred_logits if isinstance(pred_logits, (list, tuple)) else [pred_logits]
    target = Tensor(np.atleast_2d(np.asarray(target_dist, dtype=np.float64)))
    total = None
    for logits in heads:
        log_probs = logits.log_softmax(axis=1)
        cross_entropy = -(target * log_probs).sum(axis=1)
        pred_entropy = -(log_probs.exp() * log_probs).sum(axis=1)
        head_loss = (cross_entropy + pred_entropy * entropy_weight).mean()
        total = head_loss if total is None else total + head_loss
    return total * (1.0 / len(heads))


def scalar_bellman_target(
    rewards, dones, gamma: float, alpha: float, next_values, next_entropy
) -> np.ndarray:
    """Plain bootstrapped scalar target with mean-of-twins next values."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    values = _average_heads(next_values)
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    next_entropy = np.asarray(next_entropy, dtype=np.float64)
    return rewards + (1.0 - dones) * gamma * (values + alpha * next_entropy)


def scalar_bellman_residual(q_pred, q_target) -> Tensor:
    """Half mean squared error between predictions and frozen targets."""
    heads: Sequence = q_pred if isinstance(q_pred, (list, tuple)) else [q_pred]
    target = Tensor(np.asarray(q_target, dtype=np.float64))
    total = None
    for pred in heads:
        head_loss = (pred - target).square().mean() * 0.5
        total = head_loss if total is None else total + head_loss
    return total * (1.0 / len(heads))
