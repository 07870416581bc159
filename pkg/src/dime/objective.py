"""Actor-side training signals: the policy loss and temperature tuning.

The policy loss samples a fresh denoising trajectory per state and scores
the resulting action with the frozen critic; the per-sample entropy bound
enters the same loss weighted by the temperature.  Because every sampling
step is reparameterized, one backward pass reaches the denoiser weights
and the schedule's rate multipliers together.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .critic import ValueSupport, q_from_logits
from .diffusion import NoiseSchedule, sample_trajectory


def policy_loss(
    score_fn,
    schedule: NoiseSchedule,
    q_fn,
    alpha: float,
    observations,
    rng: np.random.Generator,
    squash: bool = True,
):
    """Monte-Carlo actor loss over one batch of observations.

    Returns ``(loss, trajectory)`` where ``loss`` is the batch mean of
    ``-Q(s, a) - alpha * entropy_bound``; the trajectory is handed back so
    callers can reuse its entropy bound (for temperature tuning) without a
    second sampling pass.  ``q_fn(obs, action) -> Tensor`` must be
    differentiable in the action and treat its own parameters as frozen.
    """
    obs_np = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if obs_np.shape[0] == 0:
        raise ValueError("policy loss needs a non-empty batch of states")
    obs = Tensor(obs_np)
    trajectory = sample_trajectory(score_fn, schedule, obs, rng, squash=squash)
    action = trajectory.env_action_tensor if squash else trajectory.pre_squash_action
    q_values = q_fn(obs, action)
    loss = (q_values * -1.0 - trajectory.entropy_bound * alpha).mean()
    return loss, trajectory


def twin_mean_q(critic_net, support: ValueSupport):
    """Adapt a twin categorical critic into the actor's scalar Q function.

    Heads run in eval mode, so normalization is a fixed affine map and the
    batch statistics are untouched; the two head means are averaged.
    """

    def q_fn(obs: Tensor, action: Tensor) -> Tensor:
        logits = critic_net.forward(obs, action, train=False)
        total = None
        for head in logits:
            value = q_from_logits(head, support)
            total = value if total is None else total + value
        return total * (1.0 / len(logits))

    return q_fn


class Temperature:
    """Entropy weight stored as log(alpha) so it can never leave (0, inf).

    One update is a fixed-size step on log(alpha) proportional to the gap
    between the entropy target and the observed bound.  With the default
    direction the weight rises while the policy's entropy bound sits below
    target and falls above it, so the only fixed point is at the target.
    The opposite direction is available behind a flag.
    """

    def __init__(
        self,
        entropy_target: float,
        lr: float = 1e-3,
        initial_alpha: float = 1.0,
        raise_when_below_target: bool = True,
    ):
        if lr <= 0.0:
            raise ValueError("temperature step size must be positive")
        if initial_alpha <= 0.0:
            raise ValueError("initial temperature must be positive")
        self.entropy_target = float(entropy_target)
        self.lr = float(lr)
        self.log_alpha = math.log(initial_alpha)
        self.direction = 1.0 if raise_when_below_target else -1.0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def update(self, entropy_value: float) -> float:
        """Step log(alpha) once against the batch-mean entropy bound.

        ``entropy_value`` must already be detached from any graph; returns
        the new alpha.
        """
        gap = self.entropy_target - float(entropy_value)
        self.log_alpha += self.direction * self.lr * gap
        return self.alpha
