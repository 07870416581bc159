"""Independent verification oracles.

Everything in this module answers "what should the number be?" by a route
that shares no code with the trained components: finite differences instead
of the autodiff engine, exhaustive path enumeration instead of sampled
chains, linear-algebra policy iteration instead of gradient descent, and
closed-form Gaussian recursions instead of learned scores.  Test modules
and the ``verify`` command compare the two routes.

Deliberately numpy-only; nothing here imports from the rest of the package.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

# --------------------------------------------------------------------------
# Finite-difference gradients
# --------------------------------------------------------------------------


def finite_difference_gradient(f, xs: list, h: float = 1e-5) -> list:
    """Central-difference gradient of a scalar function of numpy arrays.

    ``f`` is called as ``f(*xs)`` and must return a float.  The arrays are
    perturbed in place one element at a time and restored, so ``f`` must
    read them fresh on every call.
    """
    grads = []
    for x in xs:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs)
            flat[i] = orig - h
            fm = f(*xs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a - b| / max(1, |a|, |b|), reduced to the worst entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --------------------------------------------------------------------------
# Exact path-space KL on a discretized action grid
# --------------------------------------------------------------------------


@dataclass
class GridChain:
    """A noising/denoising chain discretized onto a uniform 1-D grid.

    ``fwd_kernels[k][i, j]`` is the probability of moving from grid point i
    at level k to point j at level k+1; ``bwd_kernels[k][i, j]`` the
    probability of moving from point i at level k+1 down to point j at
    level k.  ``target_mass`` initializes the forward chain at level 0 and
    ``prior_mass`` the backward chain at level N.
    """

    grid: np.ndarray
    target_mass: np.ndarray
    prior_mass: np.ndarray
    fwd_kernels: list = field(default_factory=list)
    bwd_kernels: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.fwd_kernels)


def _row_normalized_gaussian(grid: np.ndarray, means: np.ndarray, var: float) -> np.ndarray:
    """Row i: Gaussian mass N(grid_j; means_i, var), renormalized over j."""
    logw = -0.5 * (grid[None, :] - means[:, None]) ** 2 / var
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def build_grid_chain(
    grid: np.ndarray,
    log_target: np.ndarray,
    score_table: np.ndarray,
    betas: np.ndarray,
    eta: float,
    delta: float,
) -> GridChain:
    """Discretize the Euler noising/denoising kernels onto ``grid``.

    ``betas[k]`` drives the transition between levels k and k+1 in both
    directions.  ``score_table[k][i]`` is the denoiser output used by the
    backward kernel from level k+1 down to level k, evaluated at grid
    point i.  Grid spacing must be uniform, at most 21 points, at most
    3 steps: the path enumeration downstream is exponential in the chain
    length by design.
    """
    grid = np.asarray(grid, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    n_steps = len(betas)
    if grid.size > 21:
        raise ValueError(f"grid limited to 21 points, got {grid.size}")
    if n_steps > 3:
        raise ValueError(f"chain limited to 3 steps, got {n_steps}")
    spacing = np.diff(grid)
    if grid.size > 1 and not np.allclose(spacing, spacing[0], rtol=1e-9, atol=0.0):
        raise ValueError("grid spacing must be uniform")
    if score_table.shape != (n_steps, grid.size):
        raise ValueError(f"score table must be ({n_steps}, {grid.size}), got {score_table.shape}")

    lt = np.asarray(log_target, dtype=np.float64)
    target_mass = np.exp(lt - lt.max())
    target_mass /= target_mass.sum()
    lp = -0.5 * grid**2 / eta**2
    prior_mass = np.exp(lp - lp.max())
    prior_mass /= prior_mass.sum()

    fwd, bwd = [], []
    for k in range(n_steps):
        b = betas[k]
        var = 2.0 * eta**2 * b * delta
        fwd.append(_row_normalized_gaussian(grid, (1.0 - b * delta) * grid, var))
        drift = (b * grid + 2.0 * eta**2 * b * score_table[k]) * delta
        bwd.append(_row_normalized_gaussian(grid, grid + drift, var))
    return GridChain(grid, target_mass, prior_mass, fwd, bwd)


def _joint_path_masses(chain: GridChain) -> tuple:
    """Full joints over (i_0, ..., i_N) for both chains, by enumeration."""
    n = chain.n_steps
    g = chain.grid.size
    # forward joint grows from level 0 upward; last axis is the newest level
    p_fwd = chain.target_mass
    for k in range(n):
        p_fwd = p_fwd[..., None] * chain.fwd_kernels[k]
    # backward joint grows from level N downward; first axis is the newest level
    p_bwd = chain.prior_mass
    for k in range(n - 1, -1, -1):
        rest = p_bwd.ndim - 1
        kern_t = chain.bwd_kernels[k].T.reshape((g, g) + (1,) * rest)
        p_bwd = kern_t * p_bwd[None, ...]
    return p_fwd, p_bwd


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def path_kl_exact(chain: GridChain) -> tuple:
    """(joint KL, marginal KL) of the backward chain against the forward one.

    The joint compares the two path distributions over every level; the
    marginal compares only the distributions of the level-0 point (the
    generated action).  The joint can never be smaller in exact arithmetic.
    """
    p_fwd, p_bwd = _joint_path_masses(chain)
    joint = _kl(p_bwd, p_fwd)
    axes = tuple(range(1, chain.n_steps + 1))
    marg_bwd = p_bwd.sum(axis=axes)
    marginal = _kl(marg_bwd, chain.target_mass)
    return joint, marginal


def path_kl_monte_carlo(chain: GridChain, n_paths: int, rng: np.random.Generator) -> tuple:
    """(estimate, standard error) of the joint KL from sampled backward paths."""
    g = chain.grid.size
    n = chain.n_steps
    idx = rng.choice(g, size=n_paths, p=chain.prior_mass)
    logp_b = np.log(chain.prior_mass[idx])
    path = [idx]
    for k in range(n - 1, -1, -1):
        kern = chain.bwd_kernels[k]
        u = rng.random(n_paths)
        cdf = np.cumsum(kern[idx], axis=1)
        nxt = np.minimum((u[:, None] > cdf).sum(axis=1), g - 1)
        logp_b += np.log(kern[idx, nxt])
        idx = nxt
        path.append(idx)
    path.reverse()  # path[k] = grid index at level k
    logp_f = np.log(chain.target_mass[path[0]])
    for k in range(n):
        logp_f += np.log(chain.fwd_kernels[k][path[k], path[k + 1]])
    vals = logp_b - logp_f
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_paths))


# --------------------------------------------------------------------------
# Tabular soft policy iteration
# --------------------------------------------------------------------------


@dataclass
class SoftPolicyIterationResult:
    q_star: np.ndarray          # entropy-regularized optimal action values
    policy: np.ndarray          # converged policy, rows sum to 1
    q_policy: np.ndarray        # exact action values of the converged policy
    improvement_margins: list   # min over (s, a) of Q_{k+1} - Q_k per round
    rounds: int


def soft_value_iteration(
    rewards: np.ndarray,
    transitions: np.ndarray,
    gamma: float,
    alpha: float,
    tol: float = 1e-13,
    max_sweeps: int = 200_000,
) -> np.ndarray:
    """Fixed point of Q <- r + gamma * P [alpha * logsumexp(Q / alpha)]."""
    q = np.zeros_like(rewards)
    for _ in range(max_sweeps):
        v = alpha * logsumexp(q / alpha, axis=1)
        q_next = rewards + gamma * transitions @ v
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next
    raise RuntimeError("soft value iteration did not converge")


def _soft_policy_evaluation(
    rewards: np.ndarray, transitions: np.ndarray, gamma: float, alpha: float, policy: np.ndarray
) -> np.ndarray:
    """Exact Q of a fixed stochastic policy, entropy bonus included downstream."""
    n_states = rewards.shape[0]
    r_pi = np.sum(policy * rewards, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(policy > 0.0, policy * np.log(policy), 0.0)
    h_pi = -alpha * plogp.sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, transitions)
    v = np.linalg.solve(np.eye(n_states) - gamma * p_pi, r_pi + h_pi)
    return rewards + gamma * transitions @ v


def tabular_soft_policy_iteration(
    rewards: np.ndarray,
    transitions: np.ndarray,
    gamma: float,
    alpha: float,
    tol: float = 1e-12,
    max_rounds: int = 100_000,
) -> SoftPolicyIterationResult:
    """Alternate exact policy evaluation with Boltzmann improvement.

    Works on finite problems small enough for dense linear solves (at most
    10 states and 21 actions).  Each improvement round records the worst
    change in action values, which theory says is never negative.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    n_states, n_actions = rewards.shape
    if n_states > 10 or n_actions > 21:
        raise ValueError(f"limited to 10 states x 21 actions, got {n_states} x {n_actions}")
    if not np.allclose(transitions.sum(axis=2), 1.0, atol=1e-9):
        raise ValueError("transition rows must sum to 1")

    policy = np.full((n_states, n_actions), 1.0 / n_actions)
    q = _soft_policy_evaluation(rewards, transitions, gamma, alpha, policy)
    margins = []
    for rounds in range(1, max_rounds + 1):
        logits = q / alpha
        policy = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        q_next = _soft_policy_evaluation(rewards, transitions, gamma, alpha, policy)
        margins.append(float(np.min(q_next - q)))
        delta = float(np.max(np.abs(q_next - q)))
        q = q_next
        if delta < tol:
            break
    else:
        raise RuntimeError("soft policy iteration did not converge")
    q_star = soft_value_iteration(rewards, transitions, gamma, alpha)
    return SoftPolicyIterationResult(q_star, policy, q, margins, rounds)


def boltzmann_policy(q: np.ndarray, alpha: float) -> np.ndarray:
    logits = q / alpha
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# Closed-form Gaussian chains
# --------------------------------------------------------------------------


@dataclass
class GaussianChainMoments:
    """Per-level variances of both Euler chains for a centered Gaussian target.

    ``forward_var[n]`` is the variance of the noising chain at level n
    starting from N(0, sigma^2); ``backward_var[n]`` the variance of the
    denoising chain that starts at the prior N(0, eta^2) and applies the
    exact score of the forward marginals, ``score(x, level n) = -x / v_n``.
    Both chains stay centered, so means are identically zero.
    """

    forward_var: np.ndarray   # shape (N + 1,), index = level
    backward_var: np.ndarray  # shape (N + 1,), index = level

    @property
    def score_coefficients(self) -> np.ndarray:
        """c[n] with score(x, level n) = c[n] * x; entry 0 is unused."""
        return -1.0 / self.forward_var


def analytic_gaussian_reversal(
    sigma_target: float, betas: np.ndarray, delta: float, eta: float
) -> GaussianChainMoments:
    """Propagate exact variances through the linear Euler updates.

    ``betas[k]`` drives the transition between levels k and k+1.  The
    forward update multiplies by (1 - beta * delta) and adds noise of
    variance 2 eta^2 beta delta; the backward update with the exact linear
    score multiplies by (1 + beta * delta - 2 eta^2 beta delta / v) and
    adds the same noise.
    """
    betas = np.asarray(betas, dtype=np.float64)
    n = len(betas)
    v = np.empty(n + 1)
    v[0] = sigma_target**2
    for k in range(n):
        c = 1.0 - betas[k] * delta
        v[k + 1] = c * c * v[k] + 2.0 * eta**2 * betas[k] * delta
    w = np.empty(n + 1)
    w[n] = eta**2
    for k in range(n - 1, -1, -1):
        b = betas[k]
        m = 1.0 + b * delta - 2.0 * eta**2 * b * delta / v[k + 1]
        w[k] = m * m * w[k + 1] + 2.0 * eta**2 * b * delta
    return GaussianChainMoments(v, w)


def gaussian_entropy(sigma: float) -> float:
    return 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma)


# --------------------------------------------------------------------------
# Categorical projection, one atom at a time
# --------------------------------------------------------------------------


def project_categorical_bruteforce(
    atom_values: np.ndarray, atom_probs: np.ndarray, support: np.ndarray
) -> np.ndarray:
    """Project probability atoms onto a uniform support by linear splitting.

    Scalar loop over atoms, kept deliberately naive: clip the atom into the
    support range, find its two neighboring support points, and divide the
    mass in proportion to proximity.
    """
    v_min, v_max = support[0], support[-1]
    spacing = (v_max - v_min) / (len(support) - 1)
    out = np.zeros(len(support))
    for value, prob in zip(atom_values, atom_probs):
        z = min(max(value, v_min), v_max)
        pos = (z - v_min) / spacing
        lo = int(math.floor(pos))
        hi = int(math.ceil(pos))
        if lo == hi:
            out[lo] += prob
        else:
            out[lo] += prob * (hi - pos)
            out[hi] += prob * (pos - lo)
    return out


# --------------------------------------------------------------------------
# Quadrature targets for the two-humped bandit
# --------------------------------------------------------------------------


def bandit_log_reward(actions: np.ndarray) -> np.ndarray:
    """log of an equal mixture of N(-0.7, 0.2^2) and N(0.7, 0.2^2)."""
    a = np.asarray(actions, dtype=np.float64)
    s2 = 0.04
    norm = 1.0 / math.sqrt(2.0 * math.pi * s2)
    left = -0.5 * (a + 0.7) ** 2 / s2
    right = -0.5 * (a - 0.7) ** 2 / s2
    m = np.maximum(left, right)
    return np.log(0.5 * norm * (np.exp(left - m) + np.exp(right - m))) + m


def boltzmann_bin_masses(log_q, alpha: float, edges: np.ndarray, points_per_bin: int = 64) -> np.ndarray:
    """Normalized mass of exp(log_q / alpha) in each histogram bin.

    Composite Simpson quadrature inside every bin; ``points_per_bin`` must
    be even.  Used as the ground truth when comparing a trained policy's
    histogram against the ideal Boltzmann density.
    """
    edges = np.asarray(edges, dtype=np.float64)
    masses = np.empty(len(edges) - 1)
    for i in range(len(edges) - 1):
        xs = np.linspace(edges[i], edges[i + 1], points_per_bin + 1)
        ys = np.exp(np.asarray(log_q(xs)) / alpha)
        h = (edges[i + 1] - edges[i]) / points_per_bin
        weights = np.ones(points_per_bin + 1)
        weights[1:-1:2] = 4.0
        weights[2:-1:2] = 2.0
        masses[i] = h / 3.0 * float(weights @ ys)
    return masses / masses.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
