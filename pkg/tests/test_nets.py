"""Parameter store, MLP, and gradient-check plumbing."""

import numpy as np
import pytest

from stepalign.errors import ConfigurationError, UsageError
from stepalign.nets import (ADAM_BETAS, ADAM_EPS, Mlp, ParamStore,
                            finite_diff_check, time_features)


def test_time_features_shape_and_range():
    single = time_features(3, n_freq=4)
    assert single.shape == (8,)
    batch = time_features(np.array([0, 1, 2]), n_freq=4)
    assert batch.shape == (3, 8)
    assert np.all(np.abs(batch) <= 1.0)


def test_time_features_distinguish_timesteps():
    a = time_features(3, n_freq=8)
    b = time_features(4, n_freq=8)
    assert not np.allclose(a, b)


class TestParamStore:
    def test_add_and_duplicate(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        assert "w" in store
        with pytest.raises(ConfigurationError):
            store.add("w", np.zeros(3))

    def test_zero_grads_and_norm(self):
        store = ParamStore()
        store.add("w", np.ones(4))
        store.grad("w")[...] = 2.0
        assert store.grad_norm() == pytest.approx(4.0)
        store.zero_grads()
        assert store.grad_norm() == 0.0

    def test_copy_is_independent(self):
        store = ParamStore()
        store.add("w", np.arange(3.0))
        dup = store.copy()
        assert store.equals(dup)
        dup.param("w")[0] = 99.0
        assert not store.equals(dup)
        assert store.param("w")[0] == 0.0

    def test_assign_from_copies_values(self):
        a = ParamStore()
        a.add("w", np.zeros(3))
        b = ParamStore()
        b.add("w", np.arange(3.0))
        a.assign_from(b)
        assert a.equals(b)
        b.param("w")[0] = -1.0
        assert a.param("w")[0] == 0.0

    def test_assign_from_rejects_mismatched_blocks(self):
        a = ParamStore()
        a.add("w", np.zeros(3))
        b = ParamStore()
        b.add("v", np.zeros(3))
        with pytest.raises(ConfigurationError):
            a.assign_from(b)

    def test_freeze_locks_everything(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        store.freeze()
        assert store.frozen
        with pytest.raises(ValueError):
            store.param("w")[0] = 5.0
        with pytest.raises(UsageError):
            store.add("v", np.zeros(1))
        with pytest.raises(UsageError):
            store.adam_step(1e-3)
        with pytest.raises(UsageError):
            store.assign_from(store.copy())

    def test_frozen_copy_is_writable_again(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        store.freeze()
        dup = store.copy()
        assert not dup.frozen
        dup.param("w")[0] = 3.0  # must not raise

    def test_adam_first_step_matches_hand_computation(self):
        store = ParamStore()
        store.add("w", np.array([1.0, -2.0]))
        g = np.array([0.5, -0.25])
        store.grad("w")[...] = g
        lr = 0.1
        store.adam_step(lr)
        # One bias-corrected step from zero moments reduces to the sign update
        # lr * g / (|g| + eps).
        expected = np.array([1.0, -2.0]) - lr * g / (np.abs(g) + ADAM_EPS)
        np.testing.assert_allclose(store.param("w"), expected, rtol=0, atol=1e-15)

    def test_adam_two_steps_match_reference_recursion(self):
        store = ParamStore()
        store.add("w", np.array([0.3]))
        lr, (b1, b2) = 0.05, ADAM_BETAS
        p = np.array([0.3])
        m = np.zeros(1)
        v = np.zeros(1)
        for step, gval in enumerate([0.7, -0.2], start=1):
            store.zero_grads()
            store.grad("w")[...] = gval
            store.adam_step(lr)
            g = np.array([gval])
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** step)
            vhat = v / (1 - b2 ** step)
            p = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        np.testing.assert_allclose(store.param("w"), p, rtol=0, atol=1e-15)

    def test_adam_dict_lr_routes_by_prefix(self):
        store = ParamStore()
        store.add("enc.w", np.ones(1))
        store.add("head.w", np.ones(1))
        store.grad("enc.w")[...] = 1.0
        store.grad("head.w")[...] = 1.0
        store.adam_step({"enc": 1e-8, "default": 0.5})
        moved_enc = abs(store.param("enc.w")[0] - 1.0)
        moved_head = abs(store.param("head.w")[0] - 1.0)
        assert moved_head > 1000 * moved_enc

    def test_adam_dict_lr_without_default_is_an_error(self):
        store = ParamStore()
        store.add("enc.w", np.ones(1))
        with pytest.raises(ConfigurationError):
            store.adam_step({"head": 0.1})

    def test_nonpositive_lr_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(1))
        with pytest.raises(ConfigurationError):
            store.adam_step(0.0)


class TestMlp:
    def _build(self, widths, seed=0, **kw):
        store = ParamStore()
        net = Mlp(store, "net", widths, rng=np.random.default_rng(seed), **kw)
        return store, net

    def test_forward_shapes(self):
        store, net = self._build([5, 7, 3])
        x = np.random.default_rng(1).standard_normal((4, 5))
        out, cache = net.forward(x)
        assert out.shape == (4, 3)
        assert net.in_dim == 5 and net.out_dim == 3

    def test_zero_last_starts_at_zero_output(self):
        store, net = self._build([5, 7, 3], zero_last=True)
        x = np.random.default_rng(2).standard_normal((6, 5))
        out, _ = net.forward(x)
        assert np.all(out == 0.0)

    def test_tanh_output_is_bounded(self):
        store, net = self._build([4, 6, 2], tanh_output=True)
        x = 50.0 * np.random.default_rng(3).standard_normal((8, 4))
        out, _ = net.forward(x)
        assert np.all(np.abs(out) < 1.0)

    def test_backward_gradients_pass_finite_difference(self):
        store, net = self._build([6, 9, 4])
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 6))
        target = rng.standard_normal((5, 4))

        def loss_fn():
            store.zero_grads()
            out, cache = net.forward(x)
            diff = out - target
            net.backward(cache, 2.0 * diff / diff.size)
            return float(np.mean(diff ** 2))

        assert finite_diff_check(loss_fn, store, rng=rng) < 1e-5

    def test_backward_input_cotangent_matches_finite_difference(self):
        store, net = self._build([5, 8, 3])
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 5))
        v = rng.standard_normal((1, 3))

        out, cache = net.forward(x)
        d_in = net.backward(cache, v)
        assert d_in.shape == x.shape

        step = 1e-6
        for j in range(5):
            xp = x.copy()
            xp[0, j] += step
            xm = x.copy()
            xm[0, j] -= step
            fp = float(np.sum(net.forward(xp)[0] * v))
            fm = float(np.sum(net.forward(xm)[0] * v))
            numeric = (fp - fm) / (2 * step)
            assert abs(d_in[0, j] - numeric) < 1e-6 * (1 + abs(numeric))

    def test_finite_diff_check_requires_writable_store(self):
        store, net = self._build([3, 3])
        store.freeze()
        with pytest.raises(UsageError):
            finite_diff_check(lambda: 0.0, store)
