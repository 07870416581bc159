"""The action sampler: a learned denoising chain with Euler steps.

Actions are produced by integrating the reverse of an Ornstein-Uhlenbeck
noising process, steering each step with a denoiser output.  The log-ratio
of the noising path density to the denoising path density, accumulated
along one sampled path, is a single-sample lower bound on the entropy of
the final action; both training losses consume it.

Step-index convention: chain levels run N (prior) down to 0 (action), the
kernel between levels n-1 and n uses the schedule's entry n in both
directions, and the denoiser's integer input counts transitions, so the
step from level n to n-1 calls the denoiser with n - 1 in [0, N).
"""

import math
from dataclasses import dataclass

import numpy as np

from dime import autodiff as ad
from dime.autodiff import Tensor

SOFTPLUS_UNIT = math.log(math.e - 1.0)  # softplus(x) = 1 at this x


class NoiseSchedule:
    """Cosine ramp of noising rates with a learned per-dimension multiplier.

    The base rate for kernel n (1-based) is
    ``beta_min + (beta_max - beta_min) * (1 - cos(pi n / N)) / 2``, and the
    effective rate multiplies it by softplus of a trainable per-dimension
    parameter, initialized so the multiplier starts at exactly 1.  The
    chain always spans unit time: delta = 1 / N.
    """

    def __init__(
        self,
        n_steps: int,
        act_dim: int,
        eta: float = math.sqrt(2.5),
        beta_min: float = 0.1,
        beta_max: float = 10.0,
    ):
        if n_steps < 1:
            raise ValueError("need at least one diffusion step")
        self.n_steps = n_steps
        self.act_dim = act_dim
        self.eta = float(eta)
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.delta = 1.0 / n_steps
        n = np.arange(1, n_steps + 1)
        base = beta_min + (beta_max - beta_min) * (1.0 - np.cos(np.pi * n / n_steps)) / 2.0
        self.beta_base = np.clip(base, beta_min, beta_max)
        self.scale_raw = Tensor(np.full(act_dim, SOFTPLUS_UNIT), requires_grad=True)

    def scale(self) -> Tensor:
        """Current per-dimension multiplier, always positive."""
        return self.scale_raw.softplus()

    def beta(self, kernel_index: int, scale: Tensor | None = None) -> Tensor:
        """Effective per-dimension rate for the 1-based kernel index."""
        if not 1 <= kernel_index <= self.n_steps:
            raise ValueError(f"kernel index {kernel_index} outside [1, {self.n_steps}]")
        if scale is None:
            scale = self.scale()
        return scale * float(self.beta_base[kernel_index - 1])

    def effective_betas(self) -> np.ndarray:
        """(n_steps, act_dim) array of current rates, outside the graph."""
        with ad.no_grad():
            return self.beta_base[:, None] * self.scale().data[None, :]

    def parameters(self) -> list:
        return [self.scale_raw]

    def named_arrays(self, prefix: str = "schedule") -> dict:
        return {f"{prefix}.scale_raw": self.scale_raw.data}


@dataclass
class DiffusionTrajectory:
    """One sampled denoising pass for a batch of states.

    ``states[k]`` is chain level N - k, so ``states[0]`` is the prior draw
    and ``states[-1]`` the pre-squash action.  Log-density lists are
    ordered the same way the chain was integrated (level N down to 1).
    ``entropy_bound`` is the per-sample path log-ratio, squash correction
    included when the action was squashed.
    """

    states: list
    env_action: np.ndarray
    env_action_tensor: Tensor | None
    log_forward: list
    log_backward: list
    log_prior: Tensor
    squash_correction: Tensor | None
    entropy_bound: Tensor

    @property
    def pre_squash_action(self) -> Tensor:
        return self.states[-1]


def squash_action(a0: Tensor) -> tuple:
    """tanh-squash the final chain state.

    Returns the squashed action and the per-sample log-density correction
    ``-sum_d log(1 - tanh^2(a0_d))``, the amount the denoising chain's
    log-density grows under the change of variables.  The log term is
    evaluated as ``2 (log 2 - x - softplus(-2x))``, exact and stable for
    any magnitude of x.
    """
    squashed = a0.tanh()
    # log(1 - tanh^2 x) = 2 (log 2 - x - softplus(-2 x))
    log_one_minus_t2 = ((a0 * -2.0).softplus() + a0 - math.log(2.0)) * -2.0
    correction = log_one_minus_t2.sum(axis=-1) * -1.0
    return squashed, correction


def sample_trajectory(
    score_fn,
    schedule: NoiseSchedule,
    obs: Tensor,
    rng: np.random.Generator,
    deterministic: bool = False,
    squash: bool = True,
) -> DiffusionTrajectory:
    """Integrate the denoising chain for every row of ``obs``.

    Noise draws come from ``rng`` as fixed samples, so gradients flow
    through the whole chain by reparameterization whenever the denoiser or
    schedule parameters are in the graph.  ``deterministic`` integrates
    drift only from a zero start (the chain's modal path).  Non-finite
    values abort immediately, naming the failing step.
    """
    n_steps = schedule.n_steps
    dim = schedule.act_dim
    batch = obs.data.shape[0]
    eta2 = schedule.eta * schedule.eta
    delta = schedule.delta

    if deterministic:
        start = np.zeros((batch, dim))
    else:
        start = rng.normal(0.0, schedule.eta, size=(batch, dim))
    a = Tensor(start)
    prior_var = Tensor._make(np.full(dim, eta2), (), None)
    log_prior = ad.gaussian_log_pdf(a, Tensor._make(np.zeros(dim), (), None), prior_var)

    scale = schedule.scale()
    states = [a]
    log_forward: list = []
    log_backward: list = []
    lf_total = None
    lb_total = None
    for n in range(n_steps, 0, -1):
        beta = schedule.beta(n, scale)
        var = beta * (2.0 * eta2 * delta)
        score = score_fn(obs, a, n - 1)
        mean = a + (a + score * (2.0 * eta2)) * beta * delta
        if deterministic:
            noise_term = Tensor._make(np.zeros((batch, dim)), (), None)
        else:
            noise_term = var.sqrt() * Tensor._make(rng.standard_normal((batch, dim)), (), None)
        a_prev = mean + noise_term
        if not np.all(np.isfinite(a_prev.data)):
            raise FloatingPointError(f"denoising chain produced non-finite values at step {n}")
        lb = (var.log() + ad.LOG_2PI).sum(axis=-1) * -0.5 - (noise_term.square() / (var * 2.0)).sum(axis=-1)
        lf = ad.gaussian_log_pdf(a, a_prev * (beta * -delta + 1.0), var)
        log_backward.append(lb)
        log_forward.append(lf)
        lf_total = lf if lf_total is None else lf_total + lf
        lb_total = lb if lb_total is None else lb_total + lb
        a = a_prev
        states.append(a)

    bound = lf_total - lb_total - log_prior
    if squash:
        squashed, correction = squash_action(a)
        bound = bound - correction
        env_action = np.clip(squashed.data, -1.0 + 1e-12, 1.0 - 1e-12)
        return DiffusionTrajectory(
            states, env_action, squashed, log_forward, log_backward, log_prior, correction, bound
        )
    return DiffusionTrajectory(
        states, a.data.copy(), None, log_forward, log_backward, log_prior, None, bound
    )


def entropy_lower_bound(trajectory: DiffusionTrajectory) -> Tensor:
    """The cached per-sample path log-ratio of a sampled trajectory."""
    return trajectory.entropy_bound


def recompute_entropy_bound(trajectory: DiffusionTrajectory) -> np.ndarray:
    """Re-derive the bound from the stored per-step pieces.

    Accumulates in the same order as the sampler, so the result equals the
    cached bound bit for bit.
    """
    lf_total = None
    lb_total = None
    for lf, lb in zip(trajectory.log_forward, trajectory.log_backward):
        lf_total = lf.data if lf_total is None else lf_total + lf.data
        lb_total = lb.data if lb_total is None else lb_total + lb.data
    total = lf_total - lb_total - trajectory.log_prior.data
    if trajectory.squash_correction is not None:
        total = total - trajectory.squash_correction.data
    return total


def forward_kernel_logprob(schedule: NoiseSchedule, a_from: Tensor, a_to: Tensor, kernel_index: int) -> Tensor:
    """log-density of the noising kernel: N(a_to; (1 - beta delta) a_from, 2 eta^2 beta delta)."""
    beta = schedule.beta(kernel_index)
    var = beta * (2.0 * schedule.eta**2 * schedule.delta)
    return ad.gaussian_log_pdf(a_to, a_from * (beta * -schedule.delta + 1.0), var)


def backward_kernel_logprob(
    schedule: NoiseSchedule,
    score_fn,
    obs: Tensor,
    a_from: Tensor,
    a_to: Tensor,
    kernel_index: int,
) -> Tensor:
    """log-density of the denoising kernel from level ``kernel_index`` down.

    ``a_from`` sits at the kernel's upper level, ``a_to`` at the lower one.
    """
    eta2 = schedule.eta**2
    beta = schedule.beta(kernel_index)
    var = beta * (2.0 * eta2 * schedule.delta)
    score = score_fn(obs, a_from, kernel_index - 1)
    mean = a_from + (a_from + score * (2.0 * eta2)) * beta * schedule.delta
    return ad.gaussian_log_pdf(a_to, mean, var)


class AnalyticLinearScore:
    """Denoiser with score(x, level n) = coefficient[n] * x.

    ``coefficients`` is indexed by chain level; entry 0 is never queried.
    Useful when the noising marginals are Gaussian and the exact score is
    known in closed form.
    """

    def __init__(self, coefficients: np.ndarray):
        self.coefficients = np.asarray(coefficients, dtype=np.float64)

    def __call__(self, obs: Tensor, action: Tensor, step_index: int) -> Tensor:
        return action * float(self.coefficients[step_index + 1])
