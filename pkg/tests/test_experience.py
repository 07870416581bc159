"""Replay buffer semantics and environment dynamics checks."""

import numpy as np
import pytest

from dime import experience
from dime.experience import (
    MultimodalBandit,
    Pendulum,
    PointMass2D,
    ReplayBuffer,
    Transition,
)
from dime.oracles import bandit_log_reward


def _transition(value: float, obs_dim=2, act_dim=1) -> Transition:
    return Transition(
        obs=np.full(obs_dim, value),
        action=np.full(act_dim, value),
        reward=value,
        next_obs=np.full(obs_dim, value + 1.0),
        done=False,
    )


class TestReplayBuffer:
    def test_ring_overwrites_oldest(self):
        buf = ReplayBuffer(capacity=2, obs_dim=2, act_dim=1)
        for v in (1.0, 2.0, 3.0):
            buf.insert(_transition(v))
        assert buf.size == 2
        assert set(buf.rewards.tolist()) == {2.0, 3.0}

    def test_sample_requires_enough_data(self):
        buf = ReplayBuffer(capacity=8, obs_dim=2, act_dim=1)
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))
        buf.insert(_transition(1.0))
        with pytest.raises(ValueError):
            buf.sample(2, np.random.default_rng(0))

    def test_sample_deterministic_under_fixed_rng(self):
        buf = ReplayBuffer(capacity=16, obs_dim=2, act_dim=1)
        for v in range(10):
            buf.insert(_transition(float(v)))
        a = buf.sample(6, np.random.default_rng(7))
        b = buf.sample(6, np.random.default_rng(7))
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.obs, b.obs)

    def test_sample_fields_align(self):
        buf = ReplayBuffer(capacity=16, obs_dim=2, act_dim=1)
        for v in range(12):
            buf.insert(_transition(float(v)))
        batch = buf.sample(8, np.random.default_rng(3))
        assert np.allclose(batch.next_obs[:, 0], batch.rewards + 1.0)
        assert np.allclose(batch.obs[:, 0], batch.rewards)

    def test_rejects_nonfinite_reward(self):
        buf = ReplayBuffer(capacity=4, obs_dim=2, act_dim=1)
        bad = _transition(1.0)
        bad.reward = float("nan")
        with pytest.raises(ValueError):
            buf.insert(bad)

    def test_sampling_uniform_chi_square(self):
        # aggregate chi-square over all slots, compared with the statistic's
        # own mean +- 3 sigma (df large, normal approximation)
        n_slots = 10_000
        buf = ReplayBuffer(capacity=n_slots, obs_dim=1, act_dim=1)
        for v in range(n_slots):
            buf.insert(
                Transition(np.array([v]), np.zeros(1), 0.0, np.array([v]), False)
            )
        rng = np.random.default_rng(11)
        counts = np.zeros(n_slots)
        draws = 0
        for _ in range(1_000):
            batch = buf.sample(256, rng)
            idx = batch.obs[:, 0].astype(int)
            counts += np.bincount(idx, minlength=n_slots)
            draws += 256
        expected = draws / n_slots
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        df = n_slots - 1
        assert abs(chi2 - df) < 3.0 * np.sqrt(2.0 * df)


class TestMultimodalBandit:
    def test_reward_symmetry(self):
        env = MultimodalBandit()
        env.reset(seed=0)
        _, r_pos, done = env.step(np.array([0.7]))
        env.reset(seed=0)
        _, r_neg, _ = env.step(np.array([-0.7]))
        assert done
        assert r_pos == pytest.approx(r_neg, abs=1e-12)

    def test_argmax_sits_on_the_bumps(self):
        grid = np.linspace(-0.999, 0.999, 10_001)
        rewards = bandit_log_reward(grid)
        best = grid[np.argmax(rewards)]
        spacing = grid[1] - grid[0]
        assert min(abs(best - 0.7), abs(best + 0.7)) <= spacing

    def test_episode_protocol(self):
        env = MultimodalBandit()
        env.reset(seed=1)
        env.step(np.array([0.2]))
        with pytest.raises(RuntimeError):
            env.step(np.array([0.2]))

    def test_declared_bounds_hold(self):
        env = MultimodalBandit()
        rng = np.random.default_rng(5)
        lo, hi = env.reward_bounds
        for _ in range(2_000):
            env.reset(seed=0)
            _, r, _ = env.step(rng.uniform(-1.0, 1.0, size=1))
            assert lo <= r <= hi


class TestPointMass2D:
    def test_zero_action_from_rest_stays_put(self):
        env = PointMass2D()
        env.reset(seed=3)
        env._pos = np.array([0.2, -0.1])
        env._vel = np.zeros(2)
        obs, r, done = env.step(np.zeros(2))
        assert np.allclose(obs[:2], [0.2, -0.1])
        dists = np.sum((env.goals - np.array([0.2, -0.1])) ** 2, axis=1)
        assert r == pytest.approx(-dists.min())
        assert not done

    def test_velocity_then_position_update_order(self):
        env = PointMass2D(dt=0.5)
        env.reset(seed=0)
        env._pos = np.zeros(2)
        env._vel = np.zeros(2)
        obs, _, _ = env.step(np.array([1.0, 0.0]))
        # semi-implicit: the fresh velocity moves the position immediately
        assert obs[2] == pytest.approx(0.5)
        assert obs[0] == pytest.approx(0.25)

    def test_state_clamped(self):
        env = PointMass2D()
        env.reset(seed=0)
        for _ in range(400):
            obs, r, _ = env.step(np.array([1.0, 1.0]))
        assert np.all(np.abs(obs[:2]) <= 2.0)
        assert np.all(np.abs(obs[2:]) <= 2.0)

    def test_horizon_and_determinism(self):
        env_a, env_b = PointMass2D(), PointMass2D()
        obs_a = env_a.reset(seed=9)
        obs_b = env_b.reset(seed=9)
        assert np.array_equal(obs_a, obs_b)
        rng = np.random.default_rng(2)
        done_at = None
        for t in range(1, 201):
            a = rng.uniform(-1.0, 1.0, size=2)
            oa, ra, da = env_a.step(a)
            ob, rb, db = env_b.step(a)
            assert np.array_equal(oa, ob) and ra == rb and da == db
            if da and done_at is None:
                done_at = t
        assert done_at == 200

    def test_declared_bounds_hold(self):
        env = PointMass2D()
        rng = np.random.default_rng(6)
        lo, hi = env.reward_bounds
        env.reset(seed=0)
        for t in range(5_000):
            _, r, done = env.step(rng.uniform(-1.0, 1.0, size=2))
            assert lo <= r <= hi
            if done:
                env.reset(seed=t)


class TestPendulum:
    def test_upright_rest_zero_torque_zero_reward(self):
        env = Pendulum()
        env.set_state(0.0, 0.0)
        _, r, _ = env.step(np.array([0.0]))
        assert r == pytest.approx(0.0, abs=1e-12)

    def test_energy_conservation_untorqued(self):
        env = Pendulum(dt=0.01)
        env.set_state(np.pi + 0.005, 0.0)
        e0 = env.energy()
        prev = e0
        max_step_change = 0.0
        for _ in range(10_000):
            env.step(np.array([0.0]))
            e = env.energy()
            max_step_change = max(max_step_change, abs(e - prev))
            prev = e
        assert max_step_change < 1e-6
        assert abs(env.energy() - e0) < 1e-5

    def test_observation_encodes_angle(self):
        env = Pendulum()
        obs = env.set_state(np.pi / 2, 1.25)
        assert obs == pytest.approx([0.0, 1.0, 1.25], abs=1e-12)

    def test_speed_clamped_and_angle_wrapped(self):
        env = Pendulum()
        env.set_state(np.pi - 0.1, 0.0)
        for _ in range(500):
            obs, r, _ = env.step(np.array([1.0]))
            assert abs(obs[2]) <= env.max_speed
        assert -np.pi <= env._theta <= np.pi

    def test_declared_bounds_hold(self):
        env = Pendulum()
        rng = np.random.default_rng(8)
        lo, hi = env.reward_bounds
        env.reset(seed=0)
        for t in range(5_000):
            _, r, done = env.step(rng.uniform(-1.0, 1.0, size=1))
            assert lo <= r <= hi
            if done:
                env.reset(seed=t)


class TestRegistry:
    def test_known_names(self):
        assert isinstance(experience.make_environment("bandit"), MultimodalBandit)
        assert isinstance(experience.make_environment("pointmass"), PointMass2D)
        assert isinstance(experience.make_environment("pendulum"), Pendulum)

    def test_unknown_name_lists_options(self):
        with pytest.raises(KeyError, match="bandit"):
            experience.make_environment("cartpole")

    def test_episode_csv_round_trip(self, tmp_path):
        env = PointMass2D()
        obs = env.reset(seed=4)
        rows = []
        rng = np.random.default_rng(4)
        for t in range(5):
            a = rng.uniform(-1.0, 1.0, size=2)
            next_obs, r, done = env.step(a)
            rows.append((t, obs, a, r))
            obs = next_obs
        path = tmp_path / "episode.csv"
        experience.write_episode_csv(path, rows)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "t,s0,s1,s2,s3,a0,a1,r"
        assert len(lines) == 6
        first = lines[1].split(",")
        assert float(first[0]) == 0.0
        assert len(first) == 8
