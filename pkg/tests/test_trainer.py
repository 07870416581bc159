"""Training-loop contracts: accounting, determinism, abort, evaluation."""

import json
from pathlib import Path

import numpy as np
import pytest

from dime import experience
from dime.networks import read_checkpoint
from dime.trainer import (
    RunMetrics,
    TrainerConfig,
    TrainingDiverged,
    evaluate,
    train,
)


def tiny_config(**overrides):
    base = dict(
        env_name="bandit",
        total_steps=150,
        exploration_steps=64,
        batch_size=32,
        utd_ratio=2,
        policy_delay=3,
        gamma=0.0,
        fixed_alpha=0.5,
        n_diffusion_steps=2,
        score_hidden=16,
        time_width=16,
        n_frequencies=4,
        critic_width=16,
        n_atoms=7,
        eval_interval=50,
        eval_episodes=4,
        seed=3,
    )
    base.update(overrides)
    return TrainerConfig(**base)


class TestConfigValidation:
    def test_rejects_bad_rates(self):
        for name in ("critic_lr", "actor_lr", "temperature_lr"):
            with pytest.raises(ValueError):
                tiny_config(**{name: 0.0})

    def test_rejects_bad_gamma(self):
        with pytest.raises(ValueError):
            tiny_config(gamma=1.0)
        with pytest.raises(ValueError):
            tiny_config(gamma=-0.1)

    def test_rejects_zero_utd_and_delay(self):
        with pytest.raises(ValueError):
            tiny_config(utd_ratio=0)
        with pytest.raises(ValueError):
            tiny_config(policy_delay=0)

    def test_rejects_batch_larger_than_exploration(self):
        with pytest.raises(ValueError):
            tiny_config(exploration_steps=10, batch_size=32)

    def test_rejects_half_open_support_override(self):
        with pytest.raises(ValueError):
            tiny_config(v_min=-1.0)

    def test_rejects_nonpositive_fixed_alpha(self):
        with pytest.raises(ValueError):
            tiny_config(fixed_alpha=0.0)


class TestAccounting:
    def test_zero_steps_trains_nothing(self):
        res = train(tiny_config(total_steps=0))
        assert res.metrics.rows == []
        assert res.critic_updates == 0
        assert res.actor_updates == 0

    def test_update_counts_are_exact(self):
        res = train(tiny_config())
        expected_critic = (150 - 64) * 2
        assert res.critic_updates == expected_critic
        assert res.actor_updates == expected_critic // 3

    def test_no_updates_when_run_ends_inside_exploration(self):
        res = train(tiny_config(total_steps=50, exploration_steps=64, batch_size=32))
        assert res.critic_updates == 0
        assert res.actor_updates == 0
        assert res.metrics.rows[-1]["critic_loss"] is None

    def test_eval_rows_land_on_interval_and_final_step(self):
        res = train(tiny_config())
        assert [r["env_step"] for r in res.metrics.rows] == [50, 100, 150]

    def test_scalar_critic_mode_runs(self):
        res = train(tiny_config(scalar_critic=True))
        assert res.critic_updates == (150 - 64) * 2
        assert np.isfinite(res.metrics.rows[-1]["critic_loss"])


class TestDeterminism:
    def test_identical_seeds_give_identical_metrics_files(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            train(tiny_config(env_name="pointmass", out_dir=str(d), seed=11))
        for name in ("metrics.jsonl", "summary.csv"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d, seed in zip(dirs, (1, 2)):
            train(tiny_config(out_dir=str(d), seed=seed))
        a = (dirs[0] / "metrics.jsonl").read_bytes()
        b = (dirs[1] / "metrics.jsonl").read_bytes()
        assert a != b

    def test_wall_time_stays_out_of_metrics_files(self, tmp_path):
        train(tiny_config(out_dir=str(tmp_path)))
        for line in (tmp_path / "metrics.jsonl").read_text().splitlines():
            assert "elapsed" not in line
        timing_rows = [json.loads(l) for l in (tmp_path / "timings.jsonl").read_text().splitlines()]
        assert [r["env_step"] for r in timing_rows] == [50, 100, 150]
        assert all(r["elapsed_s"] >= 0.0 for r in timing_rows)


class TestArtifacts:
    def test_checkpoints_written_at_interval_and_end(self, tmp_path):
        res = train(tiny_config(out_dir=str(tmp_path), checkpoint_interval=60))
        names = sorted(p.name for p in tmp_path.glob("checkpoint_*.bin"))
        assert names == ["checkpoint_00000060.bin", "checkpoint_00000120.bin", "checkpoint_final.bin"]
        arrays = read_checkpoint(res.final_checkpoint)
        assert "temperature.log_alpha" in arrays
        assert any(k.startswith("score.") for k in arrays)
        assert any(k.startswith("critic.") for k in arrays)
        assert any(k.startswith("schedule.") for k in arrays)

    def test_summary_csv_matches_metrics_rows(self, tmp_path):
        res = train(tiny_config(out_dir=str(tmp_path)))
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert len(lines) == 1 + len(res.metrics.rows)
        assert lines[0].startswith("env_step,mean_return,iqm_return")


class TestAbortPath:
    def test_nan_reward_aborts_with_diagnostics(self):
        class PoisonEnv(experience.PointMass2D):
            def step(self, action):
                obs, reward, done = super().step(action)
                if self._t >= 30:
                    reward = float("nan")
                return obs, reward, done

        experience.ENVIRONMENTS["poison"] = PoisonEnv
        try:
            cfg = tiny_config(env_name="poison", total_steps=100, exploration_steps=40, gamma=0.9)
            with pytest.raises(TrainingDiverged) as err:
                train(cfg)
        finally:
            del experience.ENVIRONMENTS["poison"]
        diag = err.value.diagnostics
        assert diag["env_step"] == 30
        assert "parameter_max_abs" in diag
        assert all(np.isfinite(v) for v in diag["parameter_max_abs"].values())

    def test_abort_writes_diagnostics_file(self, tmp_path):
        class PoisonEnv(experience.MultimodalBandit):
            def step(self, action):
                obs, reward, done = super().step(action)
                return obs, float("inf"), done

        experience.ENVIRONMENTS["poison"] = PoisonEnv
        try:
            with pytest.raises(TrainingDiverged):
                train(tiny_config(env_name="poison", out_dir=str(tmp_path)))
        finally:
            del experience.ENVIRONMENTS["poison"]
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        assert diag["env_step"] == 1


class TestRunMetrics:
    def test_rejects_non_monotone_steps(self):
        metrics = RunMetrics()
        metrics.append({"env_step": 10})
        with pytest.raises(ValueError):
            metrics.append({"env_step": 10})


class ConstantRewardEnv:
    obs_dim = 1
    act_dim = 1

    def __init__(self):
        self.reward_bounds = (0.0, 2.0)
        self._t = 0

    def reset(self, seed):
        self._t = 0
        return np.zeros(1)

    def step(self, action):
        self._t += 1
        return np.zeros(1), 1.5, self._t >= 3


class TestEvaluate:
    def _policy(self, obs_dim=1, act_dim=1):
        from dime.diffusion import NoiseSchedule
        from dime.networks import ScoreNetwork

        rng = np.random.default_rng(0)
        net = ScoreNetwork(obs_dim, act_dim, 2, hidden=8, time_width=8, n_frequencies=2, rng=rng)
        return net, NoiseSchedule(2, act_dim)

    def test_constant_reward_env_iqm_is_exact(self):
        net, schedule = self._policy()
        stats = evaluate(net, schedule, ConstantRewardEnv(), episodes=5, seed=0)
        assert stats["iqm"] == pytest.approx(4.5, abs=1e-12)
        assert stats["mean"] == pytest.approx(4.5, abs=1e-12)

    def test_rejects_zero_episodes(self):
        net, schedule = self._policy()
        with pytest.raises(ValueError):
            evaluate(net, schedule, ConstantRewardEnv(), episodes=0, seed=0)

    def test_repeated_calls_identical(self):
        net, schedule = self._policy(obs_dim=4, act_dim=2)
        env = experience.PointMass2D()
        a = evaluate(net, schedule, env, episodes=4, seed=7)
        b = evaluate(net, schedule, env, episodes=4, seed=7)
        assert a == b

    def test_ci_brackets_point_estimate(self):
        net, schedule = self._policy(obs_dim=4, act_dim=2)
        env = experience.PointMass2D()
        stats = evaluate(net, schedule, env, episodes=6, seed=1)
        assert stats["ci_low"] <= stats["iqm"] <= stats["ci_high"]
