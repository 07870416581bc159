"""Replay storage and the small environment suite used for training runs.

Environments follow one tiny contract: ``reset(seed)`` returns the first
observation and fully determines the episode's randomness, ``step(action)``
returns ``(next_obs, reward, done)`` and expects actions in (-1, 1) per
dimension.  Declared reward bounds are hard bounds, relied on when sizing
the critic's value support.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .oracles import bandit_log_reward


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring over preallocated arrays, uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def insert(self, transition: Transition) -> None:
        if not np.isfinite(transition.reward):
            raise ValueError("refusing to store a non-finite reward")
        i = self.cursor
        self.obs[i] = transition.obs
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_obs[i] = transition.next_obs
        self.dones[i] = float(transition.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.size:
            raise ValueError(
                f"buffer holds {self.size} transitions, cannot sample {batch_size}"
            )
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            obs=self.obs[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_obs=self.next_obs[idx],
            dones=self.dones[idx],
        )


class MultimodalBandit:
    """Single-step task whose reward is the log of a two-bump mixture.

    The reward is maximal near both a = -0.7 and a = +0.7 and collapses in
    between, so the soft-optimal action distribution has two separated
    modes.  Observations carry no information (a single zero).
    """

    obs_dim = 1
    act_dim = 1
    horizon = 1

    def __init__(self):
        self.reward_bounds = (
            float(bandit_log_reward(np.array([0.0]))[0]),
            float(bandit_log_reward(np.array([0.7]))[0]) + 1e-9,
        )
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        self._done = False
        return np.zeros(1)

    def step(self, action):
        if self._done:
            raise RuntimeError("episode finished; call reset")
        a = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        reward = float(bandit_log_reward(np.array([a]))[0])
        self._done = True
        return np.zeros(1), reward, True


class PointMass2D:
    """Double integrator on the plane with two symmetric goals.

    Reward is the negative squared distance to the nearer goal minus a
    small action cost; starting near the origin, committing to either goal
    is equally good, which keeps the optimum bimodal.  Position and
    velocity are clamped to [-2, 2] per axis.
    """

    obs_dim = 4
    act_dim = 2
    horizon = 200

    def __init__(self, dt: float = 0.05):
        self.dt = dt
        self.goals = np.array([[0.5, 0.0], [-0.5, 0.0]])
        # position cap 2, goal offset 0.5: worst squared distance (2.5, 2)
        worst = 2.5**2 + 2.0**2
        self.reward_bounds = (-(worst + 0.01 * 2.0), 0.0)
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._t = 0

    def _obs(self) -> np.ndarray:
        return np.concatenate([self._pos, self._vel])

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._pos = rng.uniform(-0.1, 0.1, size=2)
        self._vel = np.zeros(2)
        self._t = 0
        return self._obs()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        self._vel = np.clip(self._vel + a * self.dt, -2.0, 2.0)
        self._pos = np.clip(self._pos + self._vel * self.dt, -2.0, 2.0)
        self._t += 1
        dists = np.sum((self.goals - self._pos) ** 2, axis=1)
        reward = float(-dists.min() - 0.01 * float(a @ a))
        return self._obs(), reward, self._t >= self.horizon


def _wrap_angle(theta: float) -> float:
    return float(np.arctan2(np.sin(theta), np.cos(theta)))


class Pendulum:
    """Torque-limited swing-up; the angle is zero at the upright balance.

    Semi-implicit Euler keeps the undriven system's energy bounded, which
    is what makes the long-horizon credit assignment clean rather than an
    artifact of integrator damping.
    """

    obs_dim = 3
    act_dim = 1
    horizon = 200
    max_torque = 2.0
    max_speed = 8.0
    gravity = 9.81
    mass = 1.0
    length = 1.0

    def __init__(self, dt: float = 0.05):
        self.dt = dt
        self.reward_bounds = (
            -(np.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2),
            0.0,
        )
        self._theta = np.pi
        self._theta_dot = 0.0
        self._t = 0

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self._theta), np.sin(self._theta), self._theta_dot])

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        # start near the hanging rest state
        self._theta = _wrap_angle(np.pi + rng.uniform(-0.1, 0.1))
        self._theta_dot = float(rng.uniform(-0.05, 0.05))
        self._t = 0
        return self._obs()

    def set_state(self, theta: float, theta_dot: float) -> np.ndarray:
        self._theta = _wrap_angle(theta)
        self._theta_dot = float(theta_dot)
        self._t = 0
        return self._obs()

    def energy(self) -> float:
        m, g, l = self.mass, self.gravity, self.length
        return 0.5 * m * l * l * self._theta_dot**2 + m * g * l * np.cos(self._theta)

    def step(self, action):
        a = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        torque = a * self.max_torque
        m, g, l = self.mass, self.gravity, self.length
        accel = (g / l) * np.sin(self._theta) + torque / (m * l * l)
        self._theta_dot = float(
            np.clip(self._theta_dot + accel * self.dt, -self.max_speed, self.max_speed)
        )
        self._theta = _wrap_angle(self._theta + self._theta_dot * self.dt)
        self._t += 1
        reward = -(
            self._theta**2 + 0.1 * self._theta_dot**2 + 0.001 * torque**2
        )
        return self._obs(), float(reward), self._t >= self.horizon


ENVIRONMENTS = {
    "bandit": MultimodalBandit,
    "pointmass": PointMass2D,
    "pendulum": Pendulum,
}


def make_environment(name: str, **kwargs):
    if name not in ENVIRONMENTS:
        known = ", ".join(sorted(ENVIRONMENTS))
        raise KeyError(f"unknown environment '{name}' (known: {known})")
    return ENVIRONMENTS[name](**kwargs)


def write_episode_csv(path, rows) -> None:
    """Dump one episode as CSV rows of (t, s..., a..., r)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = rows[0]
        s_names = [f"s{i}" for i in range(len(first[1]))]
        a_names = [f"a{i}" for i in range(len(first[2]))]
        writer.writerow(["t", *s_names, *a_names, "r"])
        for t, obs, action, reward in rows:
            writer.writerow([t, *np.asarray(obs), *np.asarray(action), reward])
