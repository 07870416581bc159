"""Network checks: denoiser wiring, batch renormalization algebra, the
joint critic pass, checkpoint round-trips, and the optimizer."""

import numpy as np
import pytest

from dime import networks as nets
from dime.autodiff import Tensor
from dime.oracles import finite_difference_gradient, max_relative_error


class TestScoreNetwork:
    def make(self, seed=0, **kw):
        defaults = dict(obs_dim=3, act_dim=2, n_steps=8, hidden=16, time_width=8)
        defaults.update(kw)
        return nets.ScoreNetwork(rng=np.random.default_rng(seed), **defaults)

    def test_output_shape(self):
        net = self.make()
        out = net(Tensor(np.zeros((5, 3))), Tensor(np.zeros((5, 2))), 3)
        assert out.shape == (5, 2)

    def test_zero_initialized_output(self):
        net = self.make()
        rng = np.random.default_rng(1)
        out = net(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 2))), 0)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_step_index_validation(self):
        net = self.make()
        x = Tensor(np.zeros((1, 3)))
        a = Tensor(np.zeros((1, 2)))
        for bad in (-1, 8):
            with pytest.raises(ValueError, match="step index"):
                net(x, a, bad)

    def test_construction_determinism(self):
        a = self.make(seed=7).named_arrays()
        b = self.make(seed=7).named_arrays()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_finite_outputs_over_random_parameter_draws(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(-3.0, 3.0, size=(4, 3)))
        a = Tensor(rng.uniform(-3.0, 3.0, size=(4, 2)))
        for draw in range(200):
            net = self.make(seed=1000 + draw)
            for p in net.parameters():
                p.data[...] = rng.normal(0.0, 1.0, size=p.data.shape)
            net.mark_updated()
            out = net(x, a, draw % 8)
            assert np.all(np.isfinite(out.data))

    def test_gradient_flows_to_every_parameter(self):
        net = self.make(seed=3)
        rng = np.random.default_rng(4)
        # zero-initialized output layer blocks upstream flow until perturbed
        for p in net.parameters():
            p.data += rng.normal(0.0, 0.1, size=p.data.shape)
        net.mark_updated()
        obs = Tensor(rng.normal(size=(6, 3)))
        act = Tensor(rng.normal(size=(6, 2)))
        out = (net(obs, act, 2).square()).mean()
        out.backward()
        for p in net.parameters():
            assert p.grad is not None and np.any(p.grad != 0.0)

    def test_gradient_matches_finite_differences(self):
        net = self.make(seed=5)
        rng = np.random.default_rng(6)
        for p in net.parameters():
            p.data += rng.normal(0.0, 0.1, size=p.data.shape)
        net.mark_updated()
        obs_np = rng.normal(size=(3, 3))
        act_np = rng.normal(size=(3, 2))
        target = rng.normal(size=(3, 2))
        probe = net.fc2.weight

        def loss_value(w):
            probe.data[...] = w
            net.mark_updated()
            out = net(Tensor(obs_np), Tensor(act_np), 4)
            return ((out - Tensor(target)).square()).mean().item()

        w0 = probe.data.copy()
        out = net(Tensor(obs_np), Tensor(act_np), 4)
        ((out - Tensor(target)).square()).mean().backward()
        engine_grad = probe.grad.copy()
        fd = finite_difference_gradient(loss_value, [w0.copy()])[0]
        probe.data[...] = w0
        assert max_relative_error(engine_grad, fd) < 1e-4

    def test_fourier_features_distinct_rows(self):
        feats = nets.fourier_time_features(16)
        assert feats.shape == (16, 16)
        assert np.all(np.abs(feats) <= 1.0)
        dists = np.linalg.norm(feats[:, None] - feats[None, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() > 1e-3


class TestBatchRenorm:
    def test_rejects_tiny_training_batch(self):
        bn = nets.BatchRenorm(3)
        with pytest.raises(ValueError, match=">= 2"):
            bn(Tensor(np.zeros((1, 3))), train=True)

    def test_reduces_to_standardization_when_stats_agree(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 3.0, size=(64, 4))
        bn = nets.BatchRenorm(4, eps=0.0)
        bn.running_mean = x.mean(axis=0)
        bn.running_var = x.var(axis=0)
        out = bn(Tensor(x), train=True)
        want = (x - x.mean(axis=0)) / x.std(axis=0)
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_correction_factors_clip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(50.0, 30.0, size=(32, 2))
        bn = nets.BatchRenorm(2, r_max=3.0, d_max=5.0)
        # fresh running stats (mean 0, var 1) force both clips active
        out = bn(Tensor(x), train=True)
        mu = x.mean(axis=0)
        sd = np.sqrt(x.var(axis=0) + bn.eps)
        want = (x - mu) / sd * 3.0 + 5.0
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_running_statistics_converge(self):
        rng = np.random.default_rng(2)
        bn = nets.BatchRenorm(3)
        for _ in range(1000):
            bn(Tensor(rng.normal(1.5, 2.0, size=(32, 3))), train=True)
        held_out = rng.normal(1.5, 2.0, size=(4096, 3))
        assert np.all(np.abs(bn.running_mean - held_out.mean(axis=0)) < 0.1)
        assert np.all(np.abs(np.sqrt(bn.running_var) - held_out.std(axis=0)) < 0.15)

    def test_eval_mode_is_pure(self):
        bn = nets.BatchRenorm(2)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 0.25])
        before = (bn.running_mean.tobytes(), bn.running_var.tobytes())
        x = np.array([[2.0, 0.0], [0.0, 2.0]])
        out = bn(Tensor(x), train=False)
        want = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(out.data, want, rtol=1e-12)
        assert (bn.running_mean.tobytes(), bn.running_var.tobytes()) == before

    def test_gradients_match_finite_differences(self):
        # r and d enter the layer as constants, so the reference function
        # freezes them at the unperturbed batch's values; batch mean and
        # variance stay inside the differentiated path
        rng = np.random.default_rng(3)
        x_np = rng.normal(size=(8, 3))
        target = rng.normal(size=(8, 3))
        run_mean = np.array([0.3, -0.2, 0.1])
        run_var = np.array([1.5, 0.8, 1.1])
        eps = 1e-5
        sigma_b0 = np.sqrt(x_np.var(axis=0) + eps)
        r = np.clip(sigma_b0 / np.sqrt(run_var + eps), 1.0 / 3.0, 3.0)
        d = np.clip((x_np.mean(axis=0) - run_mean) / np.sqrt(run_var + eps), -5.0, 5.0)

        def build(x, gamma, beta):
            mu = x.mean(axis=0, keepdims=True)
            sig = ((x - mu).square().mean(axis=0, keepdims=True) + eps).sqrt()
            y = (x - mu) / sig * Tensor(r) + Tensor(d)
            return ((y * gamma + beta - Tensor(target)).square()).mean()

        tensors = [
            Tensor(x_np.copy(), requires_grad=True),
            Tensor(np.array([1.0, 1.2, 0.9]), requires_grad=True),
            Tensor(np.array([0.0, 0.1, -0.1]), requires_grad=True),
        ]

        bn = nets.BatchRenorm(3, momentum=1.0)  # momentum 1: no state update
        bn.running_mean = run_mean.copy()
        bn.running_var = run_var.copy()
        bn.gamma = tensors[1]
        bn.beta = tensors[2]
        out = bn(tensors[0], train=True)
        ((out - Tensor(target)).square()).mean().backward()

        def f(*arrays):
            return build(*[Tensor(a) for a in arrays]).item()

        fd = finite_difference_gradient(f, [t.data.copy() for t in tensors])
        for t, e in zip(tensors, fd):
            assert max_relative_error(t.grad, e) < 1e-4


class TestCriticNetwork:
    def make(self, seed=0, n_out=11):
        return nets.CriticNetwork(obs_dim=3, act_dim=2, width=16, n_out=n_out, rng=np.random.default_rng(seed))

    def test_twin_heads_independent(self):
        critic = self.make()
        a = critic.heads[0].fc1.weight.data
        b = critic.heads[1].fc1.weight.data
        assert not np.array_equal(a, b)

    def test_forward_shapes(self):
        critic = self.make()
        logits = critic.forward(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2))), train=True)
        assert len(logits) == 2 and all(l.shape == (4, 11) for l in logits)

    def test_joint_pass_symmetric_when_batches_identical(self):
        critic = self.make(seed=1)
        rng = np.random.default_rng(2)
        s = Tensor(rng.normal(size=(8, 3)))
        a = Tensor(rng.normal(size=(8, 2)))
        current, nxt = critic.forward_joint(s, a, s, a)
        for cur, nx in zip(current, nxt):
            np.testing.assert_array_equal(cur.data, nx.data)

    def test_joint_pass_detaches_next_branch(self):
        critic = self.make(seed=3)
        rng = np.random.default_rng(4)
        s, a = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 2)))
        s2, a2 = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 2)))
        current, nxt = critic.forward_joint(s, a, s2, a2)
        assert all(not n.requires_grad for n in nxt)
        assert all(c.requires_grad for c in current)
        current[0].sum().backward()
        assert critic.heads[0].fc1.weight.grad is not None

    def test_joint_statistics_couple_the_batches(self):
        # the normalization batch spans both pairs, so changing the next
        # batch changes the current outputs too
        critic = self.make(seed=5)
        rng = np.random.default_rng(6)
        s, a = Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=(8, 2)))
        s2a = Tensor(rng.normal(size=(8, 3)))
        s2b = Tensor(rng.normal(size=(8, 3)) * 5.0)
        a2 = Tensor(rng.normal(size=(8, 2)))
        cur_a, _ = critic.forward_joint(s, a, s2a, a2)
        critic2 = self.make(seed=5)
        cur_b, _ = critic2.forward_joint(s, a, s2b, a2)
        assert not np.allclose(cur_a[0].data, cur_b[0].data)

    def test_eval_forward_is_pure(self):
        critic = self.make(seed=7)
        state = {k: v.tobytes() for k, v in critic.named_arrays().items()}
        critic.forward(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2))), train=False)
        after = {k: v.tobytes() for k, v in critic.named_arrays().items()}
        assert state == after


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        critic = nets.CriticNetwork(2, 1, width=8, n_out=5, rng=np.random.default_rng(0))
        arrays = critic.named_arrays()
        path = tmp_path / "model.ckpt"
        nets.write_checkpoint(path, arrays)
        loaded = nets.read_checkpoint(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert loaded[k].tobytes() == np.ascontiguousarray(arrays[k]).tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            nets.read_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nets.write_checkpoint(path, {"w": np.ones((4, 4))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            nets.read_checkpoint(path)

    def test_load_into_checks_shapes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nets.write_checkpoint(path, {"w": np.ones((2, 2))})
        loaded = nets.read_checkpoint(path)
        with pytest.raises(ValueError, match="shape mismatch"):
            nets.load_into(loaded, {"w": np.zeros((3, 2))})
        with pytest.raises(KeyError, match="missing"):
            nets.load_into(loaded, {"v": np.zeros((2, 2))})

    def test_scalar_and_empty_shapes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nets.write_checkpoint(path, {"log_alpha": np.array(0.5), "row": np.arange(3.0)})
        loaded = nets.read_checkpoint(path)
        assert loaded["log_alpha"].shape == ()
        np.testing.assert_array_equal(loaded["row"], [0.0, 1.0, 2.0])


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = nets.Adam([p], lr=0.01)
        p.grad = np.array([123.0])
        opt.step()
        # bias-corrected first step is lr * sign(grad) up to eps rounding
        np.testing.assert_allclose(p.data, 1.0 - 0.01, rtol=1e-6)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = nets.Adam([p], lr=0.05)
        for _ in range(2000):
            loss = (p - Tensor([1.0, 2.0])).square().sum()
            loss.backward()
            opt.step()
        np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-4)

    def test_skips_parameters_without_gradients(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        q = Tensor(np.array([2.0]), requires_grad=True)
        opt = nets.Adam([p, q], lr=0.1)
        p.grad = np.array([1.0])
        q.grad = None
        opt.step()
        assert q.data[0] == 2.0 and p.data[0] != 1.0
