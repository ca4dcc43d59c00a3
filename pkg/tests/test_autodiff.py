"""Tensor core: forward semantics against brute-force oracles, gradients
against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agseg.autodiff import (
    Tensor,
    add,
    mul,
    relu,
    sigmoid,
    clip,
    tlog,
    powc,
    tsum,
    tmean,
    conv2d,
    conv_transpose2d,
    maxpool2d,
    upsample_nearest,
)

from oracles import (
    conv2d_direct,
    conv_transpose2d_direct,
    maxpool2d_direct,
    upsample_nearest_direct,
    fd_gradient,
    max_rel_error,
)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestConv2d:
    def test_zero_input_zero_bias(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        w = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(2))
        out = conv2d(x, w, b, stride=1, padding=1)
        assert np.all(out.data == 0)

    def test_identity_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5)).astype(np.float32)
        w = rng.uniform(-1, 1, size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, size=3).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=0)
        expect = conv2d_direct(x, w, b, stride=1, padding=0)
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_oracle_stride_padding_grid(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.uniform(-1, 1, size=(2, 3, 7, 6)).astype(np.float32)
        w = rng.uniform(-1, 1, size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, size=4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        expect = conv2d_direct(x, w, b, stride=stride, padding=padding)
        assert out.shape == expect.shape
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w, b)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        w = rng.uniform(-1, 1, size=(3, 2, 3, 3))
        b = rng.uniform(-1, 1, size=3)
        tx, tw, tb = t64(x, True), t64(w, True), t64(b, True)
        loss = tsum(conv2d(tx, tw, tb, stride=2, padding=1))
        loss.backward()

        def f():
            return tsum(conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)).item()

        gx, gw, gb = fd_gradient(f, [x, w, b])
        assert max_rel_error(tx.grad, gx) < 1e-3
        assert max_rel_error(tw.grad, gw) < 1e-3
        assert max_rel_error(tb.grad, gb) < 1e-3


class TestConvTranspose2d:
    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        w = Tensor(np.random.default_rng(0).normal(size=(2, 3, 2, 2)).astype(np.float32))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = conv_transpose2d(x, w, b, stride=2)
        for c in range(3):
            np.testing.assert_allclose(out.data[:, c], b.data[c])

    def test_scatter_hand_case(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        w = Tensor(np.ones((1, 1, 2, 2)))
        b = Tensor(np.zeros(1))
        out = conv_transpose2d(x, w, b, stride=2, padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(2, 3, 4, 5)).astype(np.float32)
        w = rng.uniform(-1, 1, size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, size=2).astype(np.float32)
        out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        expect = conv_transpose2d_direct(x, w, b, stride=2, padding=1)
        assert out.shape == expect.shape
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            x = rng.uniform(-1, 1, size=(1, 2, 6, 6))
            w = rng.uniform(-1, 1, size=(3, 2, 3, 3))
            y_shape = conv2d(t64(x), t64(w), t64(np.zeros(3))).shape
            y = rng.uniform(-1, 1, size=y_shape)
            lhs = np.sum(conv2d(t64(x), t64(w), t64(np.zeros(3))).data * y)
            rhs = np.sum(x * conv_transpose2d(t64(y), t64(w), t64(np.zeros(2))).data)
            assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-4

    def test_negative_extent_rejected(self):
        x = Tensor(np.zeros((1, 1, 1, 1)))
        w = Tensor(np.zeros((1, 1, 2, 2)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ValueError, match="extent"):
            conv_transpose2d(x, w, b, stride=1, padding=2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(-1, 1, size=(1, 2, 3, 3))
        w = rng.uniform(-1, 1, size=(2, 3, 2, 2))
        b = rng.uniform(-1, 1, size=3)
        tx, tw, tb = t64(x, True), t64(w, True), t64(b, True)
        loss = tsum(conv_transpose2d(tx, tw, tb, stride=2))
        loss.backward()

        def f():
            return tsum(conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2)).item()

        gx, gw, gb = fd_gradient(f, [x, w, b])
        assert max_rel_error(tx.grad, gx) < 1e-3
        assert max_rel_error(tw.grad, gw) < 1e-3
        assert max_rel_error(tb.grad, gb) < 1e-3

    def test_shape_algebra_roundtrip(self):
        # conv then transpose with the same (kernel, stride, padding) restores
        # the spatial shape when (H + 2p - k) divides the stride evenly
        for h, k, s, p in [(8, 3, 1, 1), (9, 3, 2, 1), (8, 2, 2, 0), (12, 4, 2, 1)]:
            if (h + 2 * p - k) % s != 0:
                continue
            x = Tensor(np.zeros((1, 2, h, h)))
            w = Tensor(np.zeros((3, 2, k, k)))
            wt = Tensor(np.zeros((3, 2, k, k)))
            mid = conv2d(x, w, Tensor(np.zeros(3)), stride=s, padding=p)
            back = conv_transpose2d(mid, wt, Tensor(np.zeros(2)), stride=s, padding=p)
            assert back.shape == x.shape


class TestMaxpool:
    def test_constant_input(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5))
        out = maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))

    def test_single_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = maxpool2d(x, 2, 2)
        assert out.data.reshape(()) == 4.0

    def test_matches_sliding_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(-1, 1, size=(1, 1, 6, 6)).astype(np.float32)
        for window, stride in [(2, 2), (3, 1), (2, 1), (3, 3)]:
            out = maxpool2d(Tensor(x), window, stride)
            np.testing.assert_array_equal(out.data, maxpool2d_direct(x, window, stride))

    def test_tie_gradient_goes_to_first(self):
        x = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), requires_grad=True)
        out = maxpool2d(x, 2, 2)
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(19)
        # keep values well separated so the argmax never sits on a kink
        x = rng.permutation(36).reshape(1, 1, 6, 6).astype(np.float64)
        tx = t64(x, True)
        tsum(maxpool2d(tx, 2, 2)).backward()

        def f():
            return tsum(maxpool2d(Tensor(x), 2, 2)).item()

        (gx,) = fd_gradient(f, [x])
        assert max_rel_error(tx.grad, gx) < 1e-3


class TestUpsample:
    def test_factor_one_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)).astype(np.float32))
        out = upsample_nearest(x, 1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_replication_pattern(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = upsample_nearest(x, 2)
        expect = np.array([[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=np.float32)
        np.testing.assert_array_equal(out.data, expect)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(23)
        x = rng.uniform(-1, 1, size=(2, 3, 3, 4)).astype(np.float32)
        out = upsample_nearest(Tensor(x), 3)
        np.testing.assert_array_equal(out.data, upsample_nearest_direct(x, 3))

    def test_gradients_match_finite_differences(self):
        x = np.random.default_rng(29).uniform(-1, 1, size=(1, 1, 2, 2))
        tx = t64(x, True)
        tsum(mul(upsample_nearest(tx, 2), upsample_nearest(tx, 2))).backward()

        def f():
            u = upsample_nearest(Tensor(x), 2)
            return tsum(mul(u, u)).item()

        (gx,) = fd_gradient(f, [x])
        assert max_rel_error(tx.grad, gx) < 1e-3


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = sigmoid(Tensor(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_relu_values(self):
        out = relu(Tensor(np.array([-3.0, 3.0])))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_sigmoid_gradient_at_zero(self):
        x = np.zeros(1)
        tx = t64(x, True)
        tsum(sigmoid(tx)).backward()
        assert abs(tx.grad[0] - 0.25) < 1e-12

        def f():
            return tsum(sigmoid(Tensor(x))).item()

        (gx,) = fd_gradient(f, [x])
        assert max_rel_error(tx.grad, gx) < 1e-3

    def test_broadcast_singleton_channel(self):
        a = Tensor(np.ones((1, 3, 2, 2)))
        m = Tensor(np.full((1, 1, 2, 2), 0.5))
        out = mul(a, m)
        np.testing.assert_allclose(out.data, 0.5)

    def test_broadcast_gradient_sums(self):
        rng = np.random.default_rng(31)
        a = rng.uniform(-1, 1, size=(1, 3, 2, 2))
        m = rng.uniform(0.1, 0.9, size=(1, 1, 2, 2))
        ta, tm = t64(a, True), t64(m, True)
        tsum(mul(ta, tm)).backward()

        def f():
            return tsum(mul(Tensor(a), Tensor(m))).item()

        ga, gm = fd_gradient(f, [a, m])
        assert max_rel_error(ta.grad, ga) < 1e-3
        assert max_rel_error(tm.grad, gm) < 1e-3

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ValueError, match="broadcast"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ValueError, match="broadcast"):
            mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3, 1))))

    @given(st.floats(min_value=0.05, max_value=0.95))
    def test_log_pow_clip_gradients(self, p):
        x = np.array([p])
        tx = t64(x, True)
        tsum(mul(powc(clip(tx, 1e-7, 1 - 1e-7), 2.0), tlog(tx))).backward()

        def f():
            t = Tensor(x)
            return tsum(mul(powc(clip(t, 1e-7, 1 - 1e-7), 2.0), tlog(t))).item()

        (gx,) = fd_gradient(f, [x])
        assert max_rel_error(tx.grad, gx) < 1e-3


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)).astype(np.float32), requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_analytic_square_sum(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        tsum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            add(x, 1.0).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = tsum(mul(x, x))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_diamond_graph_accumulates_once_per_path(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = add(x, x)  # dy/dx = 2
        tsum(mul(y, y)).backward()  # d/dx (2x)^2 = 8x = 16
        np.testing.assert_allclose(x.grad, [16.0])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 6, 6)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)).astype(np.float32), requires_grad=True)
            out = conv2d(x, w, Tensor(np.zeros(2)), padding=1)
            loss = tmean(mul(out, out))
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_outputs_finite_on_finite_inputs(self):
        rng = np.random.default_rng(37)
        x = Tensor(rng.uniform(-50, 50, size=(1, 1, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.uniform(-5, 5, size=(2, 1, 3, 3)).astype(np.float32), requires_grad=True)
        out = sigmoid(conv2d(x, w, Tensor(np.zeros(2)), padding=1))
        loss = tmean(out)
        loss.backward()
        assert np.all(np.isfinite(out.data))
        assert np.all(np.isfinite(x.grad))
        assert np.all(np.isfinite(w.grad))


@settings(max_examples=20, deadline=None)
@given(
    st.integers(min_value=1, max_value=2),
    st.integers(min_value=1, max_value=3),
    st.integers(min_value=3, max_value=6),
    st.integers(min_value=1, max_value=3),
    st.integers(min_value=1, max_value=2),
    st.integers(min_value=0, max_value=1),
    st.integers(min_value=0, max_value=2 ** 31 - 1),
)
def test_adjoint_identity_property(n, c, h, k, stride, padding, seed):
    """<conv2d(x, w), y> == <x, conv_transpose2d(y, w)> on random shapes."""
    if k > h + 2 * padding:
        k = h
    # align extents so the transpose maps back onto x's exact shape
    h += (stride - (h + 2 * padding - k) % stride) % stride
    rng = np.random.default_rng(seed)
    cout = int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, size=(n, c, h, h))
    w = rng.uniform(-1, 1, size=(cout, c, k, k))
    fwd = conv2d(t64(x), t64(w), t64(np.zeros(cout)), stride=stride, padding=padding)
    y = rng.uniform(-1, 1, size=fwd.shape)
    lhs = float(np.sum(fwd.data * y))
    rhs = float(np.sum(x * conv_transpose2d(t64(y), t64(w), t64(np.zeros(c)), stride=stride, padding=padding).data))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs), abs(rhs))
