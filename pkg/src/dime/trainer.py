"""End-to-end training loop: interaction, ratioed critic updates, delayed
actor and temperature updates, deterministic evaluation, metrics emission."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .critic import (
    ValueSupport,
    bellman_target,
    critic_loss,
    probabilities_from_logits,
    scalar_bellman_residual,
    scalar_bellman_target,
)
from .diffusion import NoiseSchedule, sample_trajectory
from .experience import ReplayBuffer, Transition, make_environment
from .networks import Adam, CriticNetwork, ScoreNetwork, write_checkpoint
from .objective import Temperature, policy_loss, twin_mean_q
from .stats import interquartile_mean, stratified_bootstrap_ci


class TrainingDiverged(RuntimeError):
    """Raised when a loss or reward goes non-finite.

    Carries a diagnostic snapshot: the environment step, the last losses,
    and the max-abs norm of every parameter array.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainerConfig:
    """Every tunable of the training loop.

    ``entropy_target=None`` resolves to 4 per action dimension.  Setting
    ``fixed_alpha`` disables temperature tuning entirely.  ``v_min``/
    ``v_max`` default to the environment's reward bounds scaled by
    1/(1-gamma).
    """

    env_name: str = "pointmass"
    total_steps: int = 100_000
    seed: int = 0
    exploration_steps: int = 5_000
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    utd_ratio: int = 2
    policy_delay: int = 1
    gamma: float = 0.99
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    temperature_lr: float = 1e-3
    initial_alpha: float = 1.0
    fixed_alpha: float | None = None
    entropy_target: float | None = None
    raise_alpha_when_entropy_low: bool = True
    n_diffusion_steps: int = 16
    eta: float = math.sqrt(2.5)
    beta_min: float = 0.1
    beta_max: float = 10.0
    score_hidden: int = 128
    time_width: int = 128
    n_frequencies: int = 8
    critic_width: int = 256
    n_atoms: int = 51
    scalar_critic: bool = False
    v_min: float | None = None
    v_max: float | None = None
    eval_interval: int = 10_000
    eval_episodes: int = 8
    checkpoint_interval: int | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.exploration_steps < 0:
            raise ValueError("exploration_steps must be >= 0")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.utd_ratio < 1:
            raise ValueError("utd_ratio must be >= 1")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("critic_lr", "actor_lr", "temperature_lr"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.initial_alpha <= 0.0:
            raise ValueError("initial_alpha must be positive")
        if self.fixed_alpha is not None and self.fixed_alpha <= 0.0:
            raise ValueError("fixed_alpha must be positive when set")
        if self.n_diffusion_steps < 1:
            raise ValueError("n_diffusion_steps must be >= 1")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.n_atoms < 2:
            raise ValueError("n_atoms must be >= 2")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if (self.v_min is None) != (self.v_max is None):
            raise ValueError("set both v_min and v_max or neither")
        if self.v_min is not None and self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.total_steps > self.exploration_steps and self.batch_size > self.exploration_steps:
            raise ValueError(
                "updates start right after exploration, so exploration_steps "
                "must be >= batch_size"
            )


# metrics.jsonl and summary.csv hold only these keys, in this order; wall
# time lives in timings.jsonl so repeated runs stay byte-identical
METRIC_KEYS = (
    "env_step",
    "mean_return",
    "iqm_return",
    "ci_low",
    "ci_high",
    "entropy_bound",
    "alpha",
    "critic_loss",
    "policy_loss",
)


@dataclass
class RunMetrics:
    """Per-eval-point records with a monotone env-step axis."""

    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["env_step"] <= self.rows[-1]["env_step"]:
            raise ValueError("metrics env_step axis must increase")
        self.rows.append(row)


@dataclass
class TrainResult:
    metrics: RunMetrics
    critic_updates: int
    actor_updates: int
    final_checkpoint: str | None
    score_net: ScoreNetwork
    schedule: NoiseSchedule
    critic: CriticNetwork
    temperature: Temperature


def evaluate(score_net, schedule, env, episodes: int, seed: int, n_resamples: int = 2000) -> dict:
    """Deterministic rollouts: drift-only chain, squashed final mean.

    Episode i resets the environment with ``seed + i``, so repeated calls
    score the same episode set.  Returns mean, interquartile mean, and a
    percentile bootstrap interval over episode returns.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng(0)  # the noise-free chain never draws
    returns = []
    for i in range(episodes):
        obs = env.reset(seed + i)
        total = 0.0
        done = False
        while not done:
            with ad.no_grad():
                traj = sample_trajectory(score_net, schedule, Tensor(obs[None, :]), rng, deterministic=True)
            obs, reward, done = env.step(traj.env_action[0])
            total += reward
        returns.append(float(total))
    arr = np.asarray(returns)
    ci_low, ci_high = stratified_bootstrap_ci(
        [arr], n_resamples=n_resamples, rng=np.random.default_rng([seed, episodes])
    )
    return {
        "returns": returns,
        "mean": float(arr.mean()),
        "iqm": float(interquartile_mean(arr)),
        "ci_low": ci_low,
        "ci_high": ci_high,
    }


class _MetricsWriter:
    """Incremental metrics files; no-op when out_dir is None."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir is not None else None
        self._metrics = None
        self._timings = None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._metrics = open(self.dir / "metrics.jsonl", "w")
            self._timings = open(self.dir / "timings.jsonl", "w")

    def write(self, row: dict, elapsed_s: float) -> None:
        if self._metrics is None:
            return
        self._metrics.write(json.dumps({k: row[k] for k in METRIC_KEYS}) + "\n")
        self._metrics.flush()
        self._timings.write(json.dumps({"env_step": row["env_step"], "elapsed_s": round(elapsed_s, 3)}) + "\n")
        self._timings.flush()

    def write_summary(self, rows: list) -> None:
        if self.dir is None:
            return
        with open(self.dir / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_KEYS)
            for row in rows:
                writer.writerow(["" if row[k] is None else row[k] for k in METRIC_KEYS])

    def write_diagnostics(self, diagnostics: dict) -> None:
        if self.dir is None:
            return
        with open(self.dir / "diagnostics.json", "w") as fh:
            json.dump(diagnostics, fh, indent=2, sort_keys=True)

    def close(self) -> None:
        if self._metrics is not None:
            self._metrics.close()
            self._timings.close()


def _named_state(score_net, schedule, critic, log_alpha: float) -> dict:
    arrays = {}
    arrays.update(score_net.named_arrays("score"))
    arrays.update(schedule.named_arrays("schedule"))
    arrays.update(critic.named_arrays("critic"))
    arrays["temperature.log_alpha"] = np.array(log_alpha)
    # chain hyperparameters, so a checkpoint alone can rebuild the policy
    arrays["meta.n_steps"] = np.array(float(schedule.n_steps))
    arrays["meta.eta"] = np.array(schedule.eta)
    arrays["meta.beta_min"] = np.array(schedule.beta_min)
    arrays["meta.beta_max"] = np.array(schedule.beta_max)
    return arrays


def train(config: TrainerConfig) -> TrainResult:
    """Run the full loop and return metrics plus the trained components.

    Update accounting is exact: after M environment steps the critic has
    seen (M - exploration) * utd updates and the actor one update per
    ``policy_delay`` critic updates.  Exploration steps act uniformly at
    random.  Any non-finite loss or reward aborts with diagnostics.
    """
    env = make_environment(config.env_name)
    eval_env = make_environment(config.env_name)
    obs_dim, act_dim = env.obs_dim, env.act_dim

    seeds = np.random.SeedSequence(config.seed).spawn(6)
    net_rng = np.random.default_rng(seeds[0])
    env_seed_rng = np.random.default_rng(seeds[1])
    explore_rng = np.random.default_rng(seeds[2])
    action_rng = np.random.default_rng(seeds[3])
    update_rng = np.random.default_rng(seeds[4])
    buffer_rng = np.random.default_rng(seeds[5])

    score_net = ScoreNetwork(
        obs_dim,
        act_dim,
        config.n_diffusion_steps,
        hidden=config.score_hidden,
        time_width=config.time_width,
        n_frequencies=config.n_frequencies,
        rng=net_rng,
    )
    schedule = NoiseSchedule(
        config.n_diffusion_steps, act_dim, eta=config.eta, beta_min=config.beta_min, beta_max=config.beta_max
    )
    critic = CriticNetwork(
        obs_dim,
        act_dim,
        width=config.critic_width,
        n_out=1 if config.scalar_critic else config.n_atoms,
        rng=net_rng,
    )
    if config.scalar_critic:
        support = None
    elif config.v_min is not None:
        support = ValueSupport(config.v_min, config.v_max, config.n_atoms)
    else:
        r_min, r_max = env.reward_bounds
        support = ValueSupport.from_reward_bounds(r_min, r_max, config.gamma, config.n_atoms)

    critic_opt = Adam(critic.parameters(), config.critic_lr)
    actor_opt = Adam(score_net.parameters() + schedule.parameters(), config.actor_lr)
    entropy_target = 4.0 * act_dim if config.entropy_target is None else config.entropy_target
    temperature = Temperature(
        entropy_target,
        lr=config.temperature_lr,
        initial_alpha=config.fixed_alpha if config.fixed_alpha is not None else config.initial_alpha,
        raise_when_below_target=config.raise_alpha_when_entropy_low,
    )
    alpha_value = temperature.alpha

    if config.scalar_critic:

        def q_fn(obs_t, act_t):
            heads = critic.forward(obs_t, act_t, train=False)
            return (heads[0].reshape((-1,)) + heads[1].reshape((-1,))) * 0.5

    else:
        q_fn = twin_mean_q(critic, support)

    capacity = min(config.buffer_capacity, max(config.total_steps, 1))
    buffer = ReplayBuffer(capacity, obs_dim, act_dim)

    metrics = RunMetrics()
    writer = _MetricsWriter(config.out_dir)
    start = time.monotonic()
    critic_updates = 0
    actor_updates = 0
    last_critic_loss: float | None = None
    last_policy_loss: float | None = None
    last_entropy_bound: float | None = None

    def abort(step: int, message: str):
        diagnostics = {
            "env_step": step,
            "critic_loss": last_critic_loss,
            "policy_loss": last_policy_loss,
            "alpha": alpha_value,
            "parameter_max_abs": {
                name: float(np.max(np.abs(arr)))
                for name, arr in _named_state(score_net, schedule, critic, temperature.log_alpha).items()
            },
        }
        writer.write_diagnostics(diagnostics)
        writer.write_summary(metrics.rows)
        writer.close()
        raise TrainingDiverged(message, diagnostics)

    def critic_update(step: int) -> None:
        nonlocal critic_updates, last_critic_loss
        batch = buffer.sample(config.batch_size, buffer_rng)
        if config.gamma == 0.0:
            # no bootstrap term, so the next-action chain is skipped; the
            # dummy next values below are multiplied by gamma and vanish
            cur_logits = critic.forward(Tensor(batch.obs), Tensor(batch.actions), train=True)
            zeros = np.zeros(batch.rewards.shape[0])
            if config.scalar_critic:
                target = scalar_bellman_target(batch.rewards, batch.dones, 0.0, alpha_value, zeros, zeros)
                loss = scalar_bellman_residual([h.reshape((-1,)) for h in cur_logits], target)
            else:
                uniform = np.full((batch.rewards.shape[0], support.n_atoms), 1.0 / support.n_atoms)
                target = bellman_target(batch.rewards, batch.dones, 0.0, alpha_value, uniform, zeros, support)
                loss = critic_loss(cur_logits, target)
        else:
            with ad.no_grad():
                nxt = sample_trajectory(score_net, schedule, Tensor(batch.next_obs), update_rng)
            cur_logits, nxt_logits = critic.forward_joint(
                Tensor(batch.obs), Tensor(batch.actions), Tensor(batch.next_obs), Tensor(nxt.env_action)
            )
            if config.scalar_critic:
                nxt_q = [h.data.reshape(-1) for h in nxt_logits]
                target = scalar_bellman_target(
                    batch.rewards, batch.dones, config.gamma, alpha_value, nxt_q, nxt.entropy_bound.data
                )
                loss = scalar_bellman_residual([h.reshape((-1,)) for h in cur_logits], target)
            else:
                nxt_probs = [probabilities_from_logits(h.data) for h in nxt_logits]
                target = bellman_target(
                    batch.rewards, batch.dones, config.gamma, alpha_value, nxt_probs, nxt.entropy_bound.data, support
                )
                loss = critic_loss(cur_logits, target)
        value = float(loss.data)
        if not math.isfinite(value):
            abort(step, f"critic loss became non-finite at step {step}")
        loss.backward()
        critic_opt.step()
        last_critic_loss = value
        critic_updates += 1

    def policy_update(step: int) -> None:
        nonlocal actor_updates, last_policy_loss, last_entropy_bound, alpha_value
        batch = buffer.sample(config.batch_size, buffer_rng)
        loss, traj = policy_loss(score_net, schedule, q_fn, alpha_value, batch.obs, update_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            abort(step, f"policy loss became non-finite at step {step}")
        loss.backward()
        actor_opt.step()
        score_net.mark_updated()
        last_policy_loss = value
        last_entropy_bound = float(traj.entropy_bound.data.mean())
        actor_updates += 1
        if config.fixed_alpha is None:
            alpha_value = temperature.update(last_entropy_bound)

    final_checkpoint = None
    obs = env.reset(int(env_seed_rng.integers(2**31)))
    try:
        for step in range(1, config.total_steps + 1):
            if step <= config.exploration_steps:
                action = explore_rng.uniform(-1.0, 1.0, act_dim)
            else:
                try:
                    with ad.no_grad():
                        traj = sample_trajectory(score_net, schedule, Tensor(obs[None, :]), action_rng)
                except FloatingPointError as exc:
                    abort(step, str(exc))
                action = traj.env_action[0]
            next_obs, reward, done = env.step(action)
            if not math.isfinite(reward):
                abort(step, f"environment returned non-finite reward at step {step}")
            buffer.insert(Transition(obs, action, reward, next_obs, done))
            obs = env.reset(int(env_seed_rng.integers(2**31))) if done else next_obs

            if step > config.exploration_steps:
                try:
                    for _ in range(config.utd_ratio):
                        critic_update(step)
                        if critic_updates % config.policy_delay == 0:
                            policy_update(step)
                except FloatingPointError as exc:
                    abort(step, str(exc))

            if step % config.eval_interval == 0 or step == config.total_steps:
                stats = evaluate(score_net, schedule, eval_env, config.eval_episodes, config.seed)
                row = {
                    "env_step": step,
                    "mean_return": stats["mean"],
                    "iqm_return": stats["iqm"],
                    "ci_low": stats["ci_low"],
                    "ci_high": stats["ci_high"],
                    "entropy_bound": last_entropy_bound,
                    "alpha": alpha_value,
                    "critic_loss": last_critic_loss,
                    "policy_loss": last_policy_loss,
                }
                metrics.append(row)
                writer.write(row, time.monotonic() - start)

            if (
                config.checkpoint_interval is not None
                and config.out_dir is not None
                and step % config.checkpoint_interval == 0
            ):
                path = Path(config.out_dir) / f"checkpoint_{step:08d}.bin"
                write_checkpoint(path, _named_state(score_net, schedule, critic, temperature.log_alpha))

        if config.out_dir is not None:
            path = Path(config.out_dir) / "checkpoint_final.bin"
            write_checkpoint(path, _named_state(score_net, schedule, critic, temperature.log_alpha))
            final_checkpoint = str(path)
        writer.write_summary(metrics.rows)
    finally:
        writer.close()

    return TrainResult(
        metrics=metrics,
        critic_updates=critic_updates,
        actor_updates=actor_updates,
        final_checkpoint=final_checkpoint,
        score_net=score_net,
        schedule=schedule,
        critic=critic,
        temperature=temperature,
    )
