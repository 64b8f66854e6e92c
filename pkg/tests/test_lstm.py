import math

import numpy as np
import pytest

from kgsm.errors import DimensionMismatch
from kgsm.lstm import (
    AdamConfig,
    AdamState,
    LstmParams,
    PARAM_NAMES,
    central_difference,
    clip_by_global_norm,
    finite_difference_gradients,
    global_norm,
    init_params,
    lstm_backward,
    lstm_forward,
    optimizer_step,
)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def random_params(F, H, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    p = init_params(F, H, seed=seed)
    return p.with_arrays({k: rng.uniform(-scale, scale, v.shape) for k, v in p.arrays().items()})


def mse_loss(x, y):
    def f(p):
        pred, _ = lstm_forward(x, p)
        return float(np.mean((pred - y) ** 2))
    return f


class TestForward:
    def test_zero_weights_predict_zero(self):
        p = LstmParams.zeros(3, 5)
        x = np.random.default_rng(0).normal(size=(4, 6, 3))
        pred, _ = lstm_forward(x, p)
        assert np.array_equal(pred, np.zeros(4))

    def test_hand_unrolled_single_cell(self):
        wx = [0.3, -0.2, 0.5, 0.7]
        wh = [0.1, 0.4, -0.3, 0.2]
        b = [0.05, 1.0, -0.1, 0.2]
        p = LstmParams(
            w_x=np.array(wx).reshape(4, 1), w_h=np.array(wh).reshape(4, 1), b=np.array(b),
            w_head=np.array([1.5]), b_head=0.1, log_a=0.0,
        )
        xs = [0.8, -1.1]
        h = c = 0.0
        for xv in xs:
            z = [wx[k] * xv + wh[k] * h + b[k] for k in range(4)]
            i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
            c = f * c + i * g
            h = o * math.tanh(c)
        expected = 1.5 * h + 0.1
        # n = 1 and n = 2 windows
        pred1, _ = lstm_forward(np.array([[[0.8]]]), p)
        z = [wx[k] * 0.8 + b[k] for k in range(4)]
        c1 = sig(z[0]) * math.tanh(z[2])
        assert pred1[0] == pytest.approx(1.5 * sig(z[3]) * math.tanh(c1) + 0.1, abs=1e-15)
        pred2, _ = lstm_forward(np.array([[[0.8], [-1.1]]]), p)
        assert pred2[0] == pytest.approx(expected, abs=1e-15)

    def test_identical_sequences(self):
        p = random_params(3, 4, 1)
        x = np.random.default_rng(2).normal(size=(1, 5, 3))
        pred, _ = lstm_forward(np.concatenate([x, x]), p)
        assert pred[0] == pred[1]

    def test_batch_permutation_invariance(self):
        p = random_params(3, 6, 3)
        x = np.random.default_rng(4).normal(size=(10, 7, 3))
        perm = np.random.default_rng(5).permutation(10)
        a, _ = lstm_forward(x, p)
        b, _ = lstm_forward(x[perm], p)
        np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-15)

    def test_long_windows_stay_finite(self):
        rng = np.random.default_rng(0)
        p = LstmParams(*(rng.uniform(-0.1, 0.1, s) for s in [(128, 9), (128, 32), (128,), (32,)]),
                       b_head=0.0, log_a=0.0)
        x = rng.normal(size=(16, 64, 9))
        pred, _ = lstm_forward(x, p)
        assert np.all(np.isfinite(pred))

    def test_dimension_mismatch(self):
        p = random_params(3, 4, 0)
        with pytest.raises(DimensionMismatch):
            lstm_forward(np.zeros((2, 5, 4)), p)
        with pytest.raises(DimensionMismatch):
            LstmParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8), np.zeros(2), 0.0, 0.0)

    def test_init_params(self):
        p = init_params(5, 16, seed=3)
        k = 1 / 4
        assert np.all(np.abs(p.w_x) <= k) and np.all(np.abs(p.w_h) <= k)
        assert np.all(p.b[16:32] == 1.0)
        assert p.a == pytest.approx(0.05)
        assert np.array_equal(init_params(5, 16, seed=3).w_x, p.w_x)


class TestBackward:
    def test_zero_upstream(self):
        p = random_params(3, 4, 0)
        x = np.random.default_rng(0).normal(size=(3, 5, 3))
        _, cache = lstm_forward(x, p)
        g = lstm_backward(cache, p, np.zeros(3))
        for v in g.values():
            assert not np.any(v)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(3, 4, seed)
        x = rng.normal(size=(3, 5, 3))
        y = rng.uniform(0, 0.5, 3)
        pred, cache = lstm_forward(x, p)
        g = lstm_backward(cache, p, 2 * (pred - y) / 3)
        rep = finite_difference_gradients(p, mse_loss(x, y), 1e-5, g)
        assert rep.max_rel_error < 1e-4, rep.per_parameter_errors

    def test_input_gradient(self):
        rng = np.random.default_rng(9)
        p = random_params(2, 3, 9)
        x = rng.normal(size=(2, 4, 2))
        pred, cache = lstm_forward(x, p)
        g = lstm_backward(cache, p, np.ones(2))
        for idx in [(0, 0, 0), (1, 3, 1), (0, 2, 1)]:
            def f(v):
                xx = x.copy()
                xx[idx] = v
                return float(lstm_forward(xx, p)[0].sum())
            assert g["inputs"][idx] == pytest.approx(central_difference(f, x[idx], 1e-5), rel=1e-6, abs=1e-10)

    def test_bad_upstream_shape(self):
        p = random_params(2, 3, 0)
        _, cache = lstm_forward(np.zeros((2, 3, 2)), p)
        with pytest.raises(DimensionMismatch):
            lstm_backward(cache, p, np.zeros(3))


class TestFiniteDifference:
    def test_quadratic(self):
        assert central_difference(lambda t: t * t, 3.0, 1e-5) == pytest.approx(6.0, abs=1e-9)

    def test_rejects_zero_step(self):
        with pytest.raises(ValueError):
            central_difference(lambda t: t, 1.0, 0.0)
        with pytest.raises(ValueError):
            finite_difference_gradients(LstmParams.zeros(1, 1), lambda p: 0.0, h=0.0)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = random_params(2, 3, 0)
        zeros = {k: np.zeros_like(v) for k, v in p.arrays().items()}
        q, st = optimizer_step(p, zeros, AdamState.zeros_like(p))
        for k in PARAM_NAMES:
            assert np.array_equal(getattr(q, k), getattr(p, k))
        assert st.t == 1

    def test_hand_computed_update(self):
        p = LstmParams.zeros(1, 1, log_a=0.5)
        grads = {k: np.zeros_like(v) for k, v in p.arrays().items()}
        grads["log_a"] = np.float64(0.2)
        st = AdamState.zeros_like(p)
        st.m["log_a"] = np.float64(0.1)
        st.v["log_a"] = np.float64(0.04)
        st.t = 1
        cfg = AdamConfig(learning_rate=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        q, st2 = optimizer_step(p, grads, st, cfg)
        m = 0.9 * 0.1 + 0.1 * 0.2
        v = 0.999 * 0.04 + 0.001 * 0.04
        mhat = m / (1 - 0.9 ** 2)
        vhat = v / (1 - 0.999 ** 2)
        assert float(st2.m["log_a"]) == pytest.approx(0.11, abs=1e-15)
        assert float(q.log_a) == pytest.approx(0.5 - 0.01 * mhat / (math.sqrt(vhat) + 1e-8), abs=1e-15)

    def test_deterministic(self):
        def run():
            p = random_params(2, 3, 0)
            st = AdamState.zeros_like(p)
            rng = np.random.default_rng(1)
            for _ in range(5):
                g = {k: rng.normal(size=v.shape) for k, v in p.arrays().items()}
                p, st = optimizer_step(p, g, st)
            return p
        a, b = run(), run()
        for k in PARAM_NAMES:
            assert np.array_equal(getattr(a, k), getattr(b, k))


class TestClipping:
    def test_scales_to_max_norm(self):
        p = LstmParams.zeros(1, 1)
        g = {k: np.full_like(v, 3.0) for k, v in p.arrays().items()}
        clipped, norm = clip_by_global_norm(g, 5.0)
        assert norm == pytest.approx(3.0 * math.sqrt(sum(v.size for v in g.values())))
        assert global_norm(clipped) == pytest.approx(5.0, rel=1e-12)

    def test_leaves_small_gradients(self):
        p = LstmParams.zeros(1, 1)
        g = {k: np.full_like(v, 0.1) for k, v in p.arrays().items()}
        clipped, _ = clip_by_global_norm(g, 5.0)
        assert all(np.array_equal(clipped[k], g[k]) for k in g)


def test_params_json_round_trip():
    p = random_params(3, 4, 0)
    q = LstmParams.from_json(p.to_json())
    assert all(np.array_equal(getattr(p, k), getattr(q, k)) for k in PARAM_NAMES)
