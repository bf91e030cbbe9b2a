import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docs_coseg import ops
from docs_coseg.gradcheck import finite_diff_gradcheck
from docs_coseg.optim import adam_step
from docs_coseg.tensor import ParamStore, Tensor

GRAD_TOL = 1e-4


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestConv2d:
    def test_zero_input_passes_bias(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        w = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)))
        out = ops.conv2d(x, w, Tensor(np.array([0.5])), 1, 1)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, 0.5)

    def test_identity_kernel(self):
        x = np.random.default_rng(1).standard_normal((2, 1, 4, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_sum(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), None, 1, 0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 45.0

    @pytest.mark.parametrize("size,k,stride,pad", [(7, 3, 1, 1), (8, 3, 2, 1), (9, 5, 2, 2), (6, 1, 1, 0), (5, 4, 1, 0)])
    def test_output_dims(self, size, k, stride, pad):
        x = np.zeros((1, 2, size, size))
        out, _ = ops.conv2d_forward(x, np.zeros((3, 2, k, k)), None, stride, pad)
        expect = (size + 2 * pad - k) // stride + 1
        assert out.shape == (1, 3, expect, expect)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ops.ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
            ops.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)), None)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_im2col_matches_direct_loops(self, stride, pad):
        rng = np.random.default_rng(2)
        x, w, b = rand(rng, 2, 3, 9, 8), rand(rng, 4, 3, 3, 3), rand(rng, 4)
        fast, _ = ops.conv2d_forward(x, w, b, stride, pad)
        ref = ops.conv2d_direct(x, w, b, stride, pad)
        np.testing.assert_allclose(fast, ref, rtol=1e-5, atol=1e-12)

    def test_banded_path_matches(self, monkeypatch):
        monkeypatch.setattr(ops, "_BAND_LIMIT", 500)
        rng = np.random.default_rng(3)
        x, w, b = rand(rng, 1, 3, 17, 17), rand(rng, 4, 3, 3, 3), rand(rng, 4)
        banded, cols = ops.conv2d_forward(x, w, b, 1, 1, keep_cols=False)
        assert cols is None
        np.testing.assert_allclose(banded, ops.conv2d_direct(x, w, b, 1, 1), rtol=1e-5, atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        err = finite_diff_gradcheck(lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [rand(rng, 1, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 3)])
        assert err < GRAD_TOL

    def test_gradcheck_strided(self):
        rng = np.random.default_rng(5)
        err = finite_diff_gradcheck(lambda x, w, b: ops.conv2d(x, w, b, 2, 1), [rand(rng, 2, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)])
        assert err < GRAD_TOL


class TestTransposedConv:
    def test_doubles_spatial_size(self):
        out = ops.transposed_conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))))
        assert out.shape == (1, 1, 4, 4)

    def test_zero_weights_give_bias(self):
        out = ops.transposed_conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.array([1.0, -2.0, 0.25])))
        for c, b in enumerate([1.0, -2.0, 0.25]):
            np.testing.assert_array_equal(out.data[0, c], b)

    @pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 1, 3), (2, 0, 2)])
    def test_equals_conv_input_gradient(self, stride, pad, k):
        rng = np.random.default_rng(6)
        w = rand(rng, 3, 2, k, k)  # conv weight: 2 -> 3 channels
        x_shape = (1, 2, 8, 8)
        x = Tensor(np.zeros(x_shape), requires_grad=True)
        y = ops.conv2d(x, Tensor(w), None, stride, pad)
        g = rand(rng, *y.shape)
        y.backward(g)
        out = ops.transposed_conv2d_forward(g, w, None, stride, pad)
        assert out.shape == x_shape
        np.testing.assert_allclose(out, x.grad, rtol=1e-12, atol=1e-12)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(7)
        w = rand(rng, 4, 3, 4, 4)
        x = rand(rng, 2, 3, 8, 8)
        y_shape = ops.conv2d_forward(x, w, None, 2, 1)[0].shape
        y = rand(rng, *y_shape)
        lhs = np.sum(ops.conv2d_forward(x, w, None, 2, 1)[0] * y)
        rhs = np.sum(x * ops.transposed_conv2d_forward(y, w, None, 2, 1))
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        err = finite_diff_gradcheck(lambda x, w, b: ops.transposed_conv2d(x, w, b, 2, 1), [rand(rng, 1, 2, 3, 3), rand(rng, 2, 3, 4, 4), rand(rng, 3)])
        assert err < GRAD_TOL


class TestMaxPool:
    def test_two_by_two(self):
        out = ops.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.item() == 4.0

    def test_constant_input_routes_to_first_element(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5), requires_grad=True)
        out = ops.maxpool2d(x)
        np.testing.assert_array_equal(out.data, 2.5)
        out.backward(np.ones(out.shape))
        expect = np.zeros((4, 4))
        expect[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expect)

    def test_window_scan(self):
        x = np.random.default_rng(9).standard_normal((1, 1, 4, 4))
        brute = np.array([[max(x[0, 0, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2)) for j in range(2)] for i in range(2)])
        np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data[0, 0], brute)

    def test_rejects_indivisible(self):
        with pytest.raises(ops.ShapeError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))

    def test_gradcheck(self):
        # distinct values keep the argmax away from ties
        x = np.random.default_rng(10).permutation(64).reshape(1, 1, 8, 8) / 8.0
        assert finite_diff_gradcheck(lambda t: ops.maxpool2d(t), x) < GRAD_TOL


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_negative_input_zero_grad(self):
        x = Tensor(-np.ones((1, 2, 3, 3)) - np.random.default_rng(0).random((1, 2, 3, 3)), requires_grad=True)
        y = ops.relu(x)
        y.backward(np.ones(y.shape))
        assert not y.data.any() and not x.grad.any()

    def test_gradcheck_away_from_zero(self):
        x = np.random.default_rng(11).standard_normal((1, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        assert finite_diff_gradcheck(ops.relu, x) < GRAD_TOL


class TestSoftmax:
    def test_equal_channels(self):
        np.testing.assert_allclose(ops.softmax_channels(Tensor(np.zeros((1, 2, 3, 3)))).data, 0.5)

    def test_stability(self):
        p = ops.softmax_channels(Tensor(np.array([0.0, 20.0]).reshape(1, 2, 1, 1))).data.ravel()
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(math.exp(-20) / (1 + math.exp(-20)), rel=1e-6)
        assert p[1] == pytest.approx(1.0, abs=1e-8)

    def test_sums_to_one(self):
        x = 10 * np.random.default_rng(12).standard_normal((3, 2, 5, 5))
        p = ops.softmax_channels(Tensor(x)).data
        assert np.all((p > 0) & (p < 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_gradcheck(self):
        x = np.random.default_rng(13).standard_normal((1, 3, 3, 3))
        assert finite_diff_gradcheck(ops.softmax_channels, x) < GRAD_TOL


class TestConcat:
    def test_single_part(self):
        x = np.random.default_rng(14).standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ops.concat_channels([Tensor(x)]).data, x)

    def test_order_and_roundtrip(self):
        rng = np.random.default_rng(15)
        a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
        out = ops.concat_channels([Tensor(a), Tensor(b)]).data
        assert out.shape == (1, 5, 4, 4)
        ra, rb = ops.split_channels(out, [2, 3])
        assert np.array_equal(ra, a) and np.array_equal(rb, b)

    def test_backward_splits(self):
        a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        g = np.arange(12.0).reshape(1, 3, 2, 2)
        ops.concat_channels([a, b]).backward(g)
        np.testing.assert_array_equal(a.grad, g[:, :2])
        np.testing.assert_array_equal(b.grad, g[:, 2:])

    def test_spatial_mismatch(self):
        with pytest.raises(ops.ShapeError):
            ops.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 3)))])


class TestCrossEntropy:
    def test_one_hot_correct(self):
        t = np.array([[[0, 1], [1, 0]]])
        p = np.stack([1 - t, t], axis=1).astype(np.float64)
        loss = ops.cross_entropy_loss(p, t)
        assert 0 < loss < 1e-6

    def test_half_everywhere(self):
        p = np.full((1, 2, 4, 4), 0.5)
        t = np.random.default_rng(16).integers(0, 2, (1, 4, 4))
        assert ops.cross_entropy_loss(p, t) == pytest.approx(math.log(2), rel=1e-12)

    def test_fused_matches_unfused_value(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal((2, 2, 3, 3))
        t = rng.integers(0, 2, (2, 3, 3))
        fused = ops.softmax_cross_entropy(Tensor(logits), t).data.item()
        assert fused == pytest.approx(ops.cross_entropy_loss(ops.softmax_forward(logits), t), rel=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        t = rng.integers(0, 2, (2, 4, 4))
        err = finite_diff_gradcheck(lambda z: ops.softmax_cross_entropy(z, t), rng.standard_normal((2, 2, 4, 4)))
        assert err < GRAD_TOL

    def test_dim_mismatch(self):
        with pytest.raises(ops.ShapeError):
            ops.cross_entropy_loss(np.full((1, 2, 4, 4), 0.5), np.zeros((1, 3, 4)))


class TestAdam:
    def test_zero_gradient_no_move(self):
        store = ParamStore([("w", np.array([1.0, -2.0]))])
        adam_step(store, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])
        assert store.step == 1

    @pytest.mark.parametrize("g", [3.0, -0.25])
    def test_first_step_closed_form(self, g):
        lr, eps = 0.01, 1e-8
        store = ParamStore([("w", np.array([0.5]))])
        adam_step(store, {"w": np.array([g])}, lr=lr, eps=eps)
        # bias-corrected m = g, v = g^2 after one step
        assert store["w"].data[0] == pytest.approx(0.5 - lr * g / (abs(g) + eps), rel=1e-12)

    def test_quadratic_descent(self):
        store = ParamStore([("w", np.array([1.0]))])
        for _ in range(100):
            adam_step(store, {"w": 2 * store["w"].data}, lr=0.1)
        assert abs(store["w"].data[0]) < 0.5

    def test_weight_decay_is_l2_term(self):
        a = ParamStore([("w", np.array([2.0]))])
        b = ParamStore([("w", np.array([2.0]))])
        adam_step(a, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.5)
        adam_step(b, {"w": np.array([1.0 + 0.5 * 2.0])}, lr=0.1)
        assert a["w"].data[0] == b["w"].data[0]

    def test_missing_gradient(self):
        store = ParamStore([("a", np.zeros(1)), ("b", np.zeros(1))])
        with pytest.raises(KeyError, match="b"):
            adam_step(store, {"a": np.zeros(1)})


class TestGradcheck:
    def test_linear(self):
        x = np.random.default_rng(19).standard_normal((1, 1, 3, 3))
        f = lambda t: ops.scale(t, 3.0)  # noqa: E731
        assert finite_diff_gradcheck(f, x) < 1e-8

    def test_detects_wrong_gradient(self):
        def bad(t):
            out = Tensor(t.data * 2.0, True, (t,), lambda g: t.accumulate(g * 3.0))
            return out

        assert finite_diff_gradcheck(bad, np.ones((1, 1, 2, 2))) > 0.1


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.sampled_from([(3, 1, 1), (1, 1, 0), (3, 2, 1), (4, 2, 1)]))
    def test_conv_adjoint(self, cin, cout, size, cfg):
        k, stride, pad = cfg
        rng = np.random.default_rng(size * 31 + cin)
        w = rng.standard_normal((cout, cin, k, k))
        x = rng.standard_normal((1, cin, size, size))
        y = rng.standard_normal(ops.conv2d_forward(x, w, None, stride, pad)[0].shape)
        lhs = np.sum(ops.conv2d_forward(x, w, None, stride, pad)[0] * y)
        rhs = np.sum(x * ops.col2im(w.reshape(cout, -1).T @ ops._nchw_to_cm(y), x.shape, k, k, stride, pad))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_forward_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((2, 3, 6, 6)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32)
        a = ops.conv2d_forward(x, w, b, 1, 1)[0]
        c = ops.conv2d_forward(x.copy(), w.copy(), b, 1, 1)[0]
        assert a.tobytes() == c.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_softmax_two_channels(self, a, b):
        p = ops.softmax_channels(Tensor(np.array([a, b]).reshape(1, 2, 1, 1))).data.ravel()
        assert 0 < p[0] < 1 or abs(a - b) > 30
        assert abs(p.sum() - 1) < 1e-6


def test_param_store_rejects_duplicates():
    store = ParamStore([("a", np.zeros(2))])
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))


def test_shared_tensor_accumulates_from_two_uses():
    w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    x = Tensor(np.full((1, 1, 2, 2), 2.0))
    y = ops.add(ops.conv2d(x, w), ops.conv2d(x, w))
    y.backward(np.ones(y.shape))
    assert w.grad.item() == 16.0
