import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmp import nn
from fedmp.errors import ConfigError, NumericError, ShapeError

RNG = np.random.default_rng


def small_model(dims=(3, 4, 2), seed=0, scale=0.5):
    arch = nn.ArchSpec(tuple(dims))
    values = RNG(seed).normal(0.0, scale, size=arch.param_count)
    return nn.ModelParams(arch, values)


def finite_diff_grad(model, batch, indices, h=1e-5):
    """Central-difference gradient of the mean loss at selected indices."""
    out = []
    for i in indices:
        up = model.values.copy()
        up[i] += h
        dn = model.values.copy()
        dn[i] -= h
        lp = nn.mean_loss(nn.ModelParams(model.arch, up), batch)
        lm = nn.mean_loss(nn.ModelParams(model.arch, dn), batch)
        out.append((lp - lm) / (2.0 * h))
    return np.array(out)


class TestArchSpec:
    def test_param_count(self):
        arch = nn.ArchSpec((2, 3, 2))
        assert arch.param_count == (2 * 3 + 3) + (3 * 2 + 2)

    def test_rejects_short_and_zero_dims(self):
        with pytest.raises(ConfigError):
            nn.ArchSpec((4,))
        with pytest.raises(ConfigError):
            nn.ArchSpec((4, 0, 2))

    def test_slices_cover_vector(self):
        arch = nn.ArchSpec((5, 7, 3, 2))
        flat = np.zeros(arch.param_count)
        for w, b in arch.layer_slices():
            flat[w] += 1
            flat[b] += 1
        assert np.all(flat == 1)


class TestInit:
    def test_kaiming_bound_two_one(self):
        # fan_in 2 -> bound sqrt(6/2) = sqrt(3)
        model = nn.init_model(nn.ArchSpec((2, 1)), seed=123)
        w = model.layers()[0][0]
        assert np.all(np.abs(w) <= math.sqrt(3.0))

    def test_deterministic(self):
        arch = nn.ArchSpec((4, 8, 3))
        a = nn.init_model(arch, seed=7)
        b = nn.init_model(arch, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_layer_one_bound_and_mean(self):
        # 32 weights drawn uniform on +-sqrt(6/4); the sample mean of n
        # uniforms has std b/sqrt(3 n).
        model = nn.init_model(nn.ArchSpec((4, 8, 3)), seed=7)
        w = model.layers()[0][0]
        bound = math.sqrt(6.0 / 4.0)
        assert np.max(np.abs(w)) <= bound
        sigma_mean = bound / math.sqrt(3.0 * w.size)
        assert abs(w.mean()) <= 3.0 * sigma_mean

    def test_bias_bound(self):
        model = nn.init_model(nn.ArchSpec((9, 5)), seed=11)
        b = model.layers()[0][1]
        assert np.all(np.abs(b) <= 1.0 / 3.0)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_all_weights_within_bounds(self, seed):
        arch = nn.ArchSpec((3, 6, 4, 2))
        model = nn.init_model(arch, seed)
        assert np.all(np.abs(model.values) <= nn.param_init_bounds(arch))


class TestForward:
    def test_zero_model_zero_logits(self):
        arch = nn.ArchSpec((3, 4, 2))
        model = nn.ModelParams(arch, np.zeros(arch.param_count))
        logits = nn.forward_logits(model, RNG(0).normal(size=(5, 3)))
        assert np.all(logits == 0.0)

    def test_identity_single_layer(self):
        arch = nn.ArchSpec((2, 2))
        values = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])  # W=I, b=0
        model = nn.ModelParams(arch, values)
        logits = nn.forward_logits(model, np.array([[3.0, -1.0]]))
        assert np.array_equal(logits, np.array([[3.0, -1.0]]))

    def test_two_layer_hand_computation(self):
        arch = nn.ArchSpec((2, 3, 2))
        w1 = np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]])
        b1 = np.array([0.01, 0.02, 0.03])
        w2 = np.array([[1.0, -1.0], [0.5, 0.25], [-0.75, 0.5]])
        b2 = np.array([0.1, -0.1])
        flat = np.concatenate([w1.reshape(-1), b1, w2.reshape(-1), b2])
        model = nn.ModelParams(arch, flat)
        xs = np.array([[1.0, 2.0], [-1.0, 0.5]])

        expected = np.zeros((2, 2))
        for n in range(2):
            hidden = []
            for j in range(3):
                z = b1[j]
                for i in range(2):
                    z += xs[n, i] * w1[i, j]
                hidden.append(max(z, 0.0))
            for k in range(2):
                z = b2[k]
                for j in range(3):
                    z += hidden[j] * w2[j, k]
                expected[n, k] = z

        assert np.allclose(nn.forward_logits(model, xs), expected, atol=1e-12)

    def test_dimension_mismatch(self):
        model = small_model((3, 2))
        with pytest.raises(ShapeError):
            nn.forward_logits(model, np.zeros((4, 5)))


class TestLossAndGrad:
    def test_uniform_logits_loss_is_log_c(self):
        arch = nn.ArchSpec((3, 4, 5))
        model = nn.ModelParams(arch, np.zeros(arch.param_count))
        batch = nn.Batch(RNG(1).normal(size=(6, 3)), np.array([0, 1, 2, 3, 4, 0]))
        loss, _ = nn.loss_and_grad(model, batch)
        assert loss == pytest.approx(math.log(5.0), rel=1e-12)

    def test_matches_finite_differences(self):
        model = small_model((3, 4, 2), seed=3)
        batch = nn.Batch(RNG(4).normal(size=(8, 3)), RNG(5).integers(0, 2, size=8))
        _, grad = nn.loss_and_grad(model, batch)
        idx = RNG(6).choice(model.arch.param_count, size=20, replace=False)
        fd = finite_diff_grad(model, batch, idx)
        rel = np.abs(grad[idx] - fd) / np.maximum(np.abs(fd), 1e-8)
        assert np.max(rel) <= 1e-4

    def test_duplication_invariance(self):
        model = small_model((2, 3, 2), seed=9)
        x = RNG(10).normal(size=(4, 2))
        y = np.array([0, 1, 1, 0])
        loss1, grad1 = nn.loss_and_grad(model, nn.Batch(x, y))
        loss2, grad2 = nn.loss_and_grad(
            model, nn.Batch(np.vstack([x, x]), np.concatenate([y, y]))
        )
        assert loss1 == pytest.approx(loss2, rel=1e-14)
        assert np.allclose(grad1, grad2, atol=1e-14)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            nn.Batch(np.zeros((0, 2)), np.zeros(0, dtype=int))

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_loss_non_negative(self, seed):
        g = RNG(seed)
        model = small_model((2, 3, 3), seed=seed, scale=1.5)
        batch = nn.Batch(g.normal(size=(5, 2)), g.integers(0, 3, size=5))
        loss, grad = nn.loss_and_grad(model, batch)
        assert loss >= 0.0
        assert np.all(np.isfinite(grad))


class TestOptStep:
    def test_sgd_definition(self):
        model = small_model((2, 2), seed=1)
        grad = RNG(2).normal(size=model.arch.param_count)
        state = nn.init_opt_state("sgd", 0.1, model.arch.param_count)
        new, new_state = nn.opt_step(model, state, grad)
        assert np.array_equal(new.values, model.values - 0.1 * grad)
        assert new_state.step == 1

    def test_sgd_zero_gradient_no_change(self):
        model = small_model((3, 2), seed=2)
        state = nn.init_opt_state("sgd", 0.5, model.arch.param_count)
        new, _ = nn.opt_step(model, state, np.zeros(model.arch.param_count))
        assert np.array_equal(new.values, model.values)

    def test_adam_first_step_hand_recurrence(self):
        # One Adam step with g = 1 everywhere: m_hat = g, v_hat = g^2, so
        # the update is lr * 1 / (1 + eps) per coordinate.
        model = small_model((2, 2), seed=3)
        p = model.arch.param_count
        lr, beta1, beta2, eps = 1e-3, 0.9, 0.999, 1e-8
        g = np.ones(p)
        m = (1 - beta1) * g
        v = (1 - beta2) * g * g
        m_hat = m / (1 - beta1)
        v_hat = v / (1 - beta2)
        expected = model.values - lr * m_hat / (np.sqrt(v_hat) + eps)

        state = nn.init_opt_state("adam", lr, p)
        new, new_state = nn.opt_step(model, state, g)
        assert np.allclose(new.values, expected, atol=1e-15)
        assert np.allclose(model.values - new.values, lr / (1 + eps), atol=1e-12)
        assert new_state.step == 1

    def test_non_finite_gradient_rejected(self):
        model = small_model((2, 2))
        state = nn.init_opt_state("sgd", 0.1, model.arch.param_count)
        bad = np.zeros(model.arch.param_count)
        bad[0] = np.nan
        with pytest.raises(NumericError):
            nn.opt_step(model, state, bad)


class TestReinit:
    def test_empty_indices_unchanged(self):
        model = small_model((2, 2), seed=5)
        assert np.array_equal(nn.reinit_params(model, [], 9).values, model.values)

    def test_full_reset_respects_bounds(self):
        model = small_model((3, 5, 2), seed=6, scale=10.0)
        reset = nn.reinit_params(model, range(model.arch.param_count), seed=7)
        assert np.all(np.abs(reset.values) <= nn.param_init_bounds(model.arch))

    def test_single_index_touches_only_that_index(self):
        model = small_model((2, 2), seed=8)
        reset = nn.reinit_params(model, [0], seed=9)
        assert np.array_equal(reset.values[1:], model.values[1:])
        assert abs(reset.values[0]) <= math.sqrt(6.0 / 2.0)

    def test_order_of_indices_irrelevant(self):
        model = small_model((3, 4, 2), seed=10)
        a = nn.reinit_params(model, [5, 1, 9], seed=11)
        b = nn.reinit_params(model, [9, 5, 1], seed=11)
        assert np.array_equal(a.values, b.values)

    def test_out_of_range_rejected(self):
        model = small_model((2, 2))
        with pytest.raises(ValueError):
            nn.reinit_params(model, [model.arch.param_count], seed=0)

    @given(data=st.data())
    @settings(max_examples=30, deadline=None)
    def test_no_aliasing(self, data):
        model = small_model((3, 4, 2), seed=12)
        p = model.arch.param_count
        idx = data.draw(st.sets(st.integers(0, p - 1), max_size=p))
        seed = data.draw(st.integers(0, 2**31))
        reset = nn.reinit_params(model, idx, seed)
        untouched = np.setdiff1d(np.arange(p), np.array(sorted(idx), dtype=int))
        assert np.array_equal(reset.values[untouched], model.values[untouched])
        for i in idx:
            assert abs(reset.values[i]) <= nn.param_init_bounds(model.arch)[i]


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        model = small_model((4, 6, 3), seed=13, scale=2.0)
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        nn.save_checkpoint(model, p1, seed_lineage=[13, 99], config_hash="abc")
        loaded, meta = nn.load_checkpoint(p1)
        assert np.array_equal(loaded.values, model.values)
        assert meta["seed_lineage"] == [13, 99]
        assert meta["config_hash"] == "abc"
        nn.save_checkpoint(loaded, p2, seed_lineage=meta["seed_lineage"], config_hash="abc")
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"format_version": 999}))
        with pytest.raises(ConfigError):
            nn.load_checkpoint(path)
