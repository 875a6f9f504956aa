import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fint.numkernel import ShapeError, sigmoid
from fint.optim import AdamState, SparseRows, adam_step, bce_logit_grad, bce_loss, clip_global_norm


class TestBCE:
    def test_half_gives_ln2(self):
        assert bce_loss(np.full(4, 0.5), np.array([0, 1, 1, 0]))[0] == pytest.approx(math.log(2), rel=1e-15)

    @pytest.mark.parametrize("yhat,y", [([1.0, 0.0], [1, 0]), ([1 - 1e-15, 1e-15], [1, 0])])
    def test_perfect_prediction_near_zero(self, yhat, y):
        loss, _ = bce_loss(np.array(yhat), np.array(y))
        assert 0.0 <= loss <= 1e-11

    def test_confident_wrong_is_finite(self):
        loss, g = bce_loss(np.array([0.0, 1.0]), np.array([1, 0]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))
        assert loss == pytest.approx(-math.log(1e-12), rel=1e-6)

    @given(st.floats(0, 1, exclude_min=True, exclude_max=True), st.integers(0, 1))
    def test_loss_finite_non_negative(self, p, y):
        loss, g = bce_loss(np.array([p]), np.array([y]))
        assert 0.0 <= loss < np.inf and np.isfinite(g[0])

    @pytest.mark.parametrize("y", [[0, 2], [0.5, 1], [-1, 0]])
    def test_bad_labels(self, y):
        with pytest.raises(ValueError):
            bce_loss(np.array([0.3, 0.4]), np.array(y))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.array([0.3, 0.4, 0.5]), np.array([0, 1]))

    @given(st.lists(st.floats(-6, 6), min_size=1, max_size=8), st.integers(0, 2**31))
    def test_logit_gradient_through_sigmoid(self, zs, seed):
        # d mean-BCE / d z_i = (yhat_i - y_i) / n, checked by central differences
        z = np.array(zs)
        y = np.random.default_rng(seed).integers(0, 2, len(z))
        h = 1e-6
        for i in range(len(z)):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd = (bce_loss(sigmoid(zp), y)[0] - bce_loss(sigmoid(zm), y)[0]) / (2 * h)
            analytic = bce_logit_grad(sigmoid(z), y)[i]
            assert abs(fd - analytic) <= 1e-7

    def test_yhat_gradient_composes_to_logit_gradient(self, rng):
        z = rng.normal(size=10)
        y = rng.integers(0, 2, 10)
        p = sigmoid(z)
        _, gy = bce_loss(p, y)
        np.testing.assert_allclose(gy * p * (1 - p), bce_logit_grad(p, y), rtol=1e-12)


def adam_oracle(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out


class TestAdam:
    @given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3))
    def test_first_step_is_lr_times_sign(self, g):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([g])}, AdamState(lr=1e-3))
        assert p["w"][0] == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-4)

    def test_zero_gradient_leaves_params_but_advances_t(self):
        p = {"w": np.array([1.0, -2.0])}
        s = AdamState()
        adam_step(p, {"w": np.zeros(2)}, s)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert s.t == 1

    def test_three_steps_match_scalar_oracle(self):
        grads = [0.5, -1.25, 2.0]
        p = {"w": np.array([0.3])}
        s = AdamState(lr=0.01)
        got = []
        for g in grads:
            adam_step(p, {"w": np.array([g])}, s)
            got.append(p["w"][0])
        for a, b in zip(got, adam_oracle(0.3, grads, lr=0.01)):
            assert a == pytest.approx(b, rel=1e-14, abs=1e-16)

    def test_quadratic_trajectory_matches_oracle(self):
        # f(x, y) = 0.5 * (3 x^2 + 0.5 y^2); gradient re-evaluated at each iterate
        curv = np.array([3.0, 0.5])
        p = {"w": np.array([1.0, -2.0])}
        s = AdamState(lr=0.1)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        ref = [1.0, -2.0]
        m, v = [0.0, 0.0], [0.0, 0.0]
        for t in range(1, 4):
            adam_step(p, {"w": curv * p["w"]}, s)
            for k in range(2):
                g = curv[k] * ref[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                ref[k] -= lr * (m[k] / (1 - b1**t)) / (math.sqrt(v[k] / (1 - b2**t)) + eps)
            np.testing.assert_allclose(p["w"], ref, rtol=1e-14)
        assert s.t == 3

    def test_step_bounded_on_random_gradients(self, rng):
        p = {"w": np.zeros(200)}
        s = AdamState(lr=1e-3)
        for _ in range(50):
            before = p["w"].copy()
            adam_step(p, {"w": rng.normal(size=200)}, s)
            assert np.max(np.abs(p["w"] - before)) <= 2e-3

    def test_sparse_rows_are_lazy(self):
        p = {"E": np.ones((4, 2))}
        s = AdamState(lr=0.1)
        adam_step(p, {"E": SparseRows(np.array([0, 2]), np.full((2, 2), 0.5), (4, 2))}, s)
        m_after_first = s.m["E"].copy()
        adam_step(p, {"E": SparseRows(np.array([2]), np.full((1, 2), 0.5), (4, 2))}, s)
        # row 0 was not touched in step two: no moment decay, no update
        np.testing.assert_array_equal(s.m["E"][0], m_after_first[0])
        np.testing.assert_array_equal(p["E"][[1, 3]], 1.0)
        assert p["E"][0, 0] == pytest.approx(0.9, rel=1e-6)

    def test_sparse_equals_dense_on_touched_rows_first_step(self):
        g = np.array([[0.2, -0.1], [0.0, 0.0], [1.5, 0.3]])
        pd, ps = {"E": np.ones((3, 2))}, {"E": np.ones((3, 2))}
        adam_step(pd, {"E": g}, AdamState())
        adam_step(ps, {"E": SparseRows(np.array([0, 2]), g[[0, 2]], (3, 2))}, AdamState())
        np.testing.assert_array_equal(pd["E"], ps["E"])

    def test_deterministic(self, rng):
        gs = [rng.normal(size=(3, 3)) for _ in range(5)]
        outs = []
        for _ in range(2):
            p, s = {"w": np.ones((3, 3))}, AdamState()
            for g in gs:
                adam_step(p, {"w": g}, s)
            outs.append(p["w"].tobytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("g", [np.zeros(3), SparseRows(np.array([0]), np.zeros((1, 3)), (5, 3))])
    def test_shape_mismatch(self, g):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros((2, 2))}, {"w": g}, AdamState())


class TestClip:
    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": SparseRows(np.array([1]), np.array([[4.0]]), (2, 1))}
        out = clip_global_norm(grads, 1.0)
        assert out["a"][0] == pytest.approx(0.6)
        assert out["b"].values[0, 0] == pytest.approx(0.8)

    def test_small_norm_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        assert clip_global_norm(grads, 1.0) is grads
