import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastflownet.tensor import (
    ConvSpec,
    ShapeError,
    avgpool2,
    avgpool2_backward,
    bilinear_resize,
    bilinear_resize_backward,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    leaky_relu,
    leaky_relu_backward,
)

from .oracles import bilinear_pixel, conv2d_loops, deconv_scatter

UP = ConvSpec(2, 2, kernel=(4, 4), stride=2, padding=1, transposed=True)


class TestConv2d:
    def test_sum_of_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32), None,
                     ConvSpec(1, 1, has_bias=False))
        assert out[0, 0, 1, 1] == 9.0

    def test_zero_weights_pass_bias(self, rng):
        spec = ConvSpec(2, 2, groups=2)
        out = conv2d(rng.random((1, 2, 4, 4)), np.zeros(spec.weight_shape), np.array([1.0, -1.0]), spec)
        assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == -1.0)

    def test_strided_matches_loops(self, rng):
        spec = ConvSpec(3, 16, stride=2)
        x = rng.random((1, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        b = rng.normal(size=16).astype(np.float32)
        out = conv2d(x, w, b, spec)
        assert out.shape == (1, 16, 4, 4)
        np.testing.assert_allclose(out, conv2d_loops(x, w, b, 2, 1, 1), atol=1e-5)

    @pytest.mark.parametrize("groups,stride", [(2, 1), (3, 2), (6, 1)])
    def test_grouped_matches_loops(self, rng, groups, stride):
        spec = ConvSpec(6, 12, stride=stride, groups=groups)
        x = rng.normal(size=(2, 6, 5, 7))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=12)
        np.testing.assert_allclose(conv2d(x, w, b, spec), conv2d_loops(x, w, b, stride, 1, groups), atol=1e-10)

    def test_grouped_equals_concat_of_slices(self, rng):
        spec = ConvSpec(6, 9, groups=3)
        x = rng.normal(size=(1, 6, 4, 4)).astype(np.float32)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        parts = [conv2d(x[:, 2 * k:2 * k + 2], w[3 * k:3 * k + 3], None, ConvSpec(2, 3, has_bias=False))
                 for k in range(3)]
        np.testing.assert_array_equal(conv2d(x, w, None, spec), np.concatenate(parts, axis=1))

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
        spec = ConvSpec(4, 4, kernel=(1, 1), padding=0, groups=4, has_bias=False)
        np.testing.assert_array_equal(conv2d(x, np.ones((4, 1, 1, 1), np.float32), None, spec), x)

    def test_output_size_formula(self):
        for h in (5, 6, 7, 64):
            spec = ConvSpec(1, 1, stride=2)
            assert spec.output_size(h, h)[0] == (h + 2 - 3) // 2 + 1

    def test_rejects_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="input channels"):
            conv2d(rng.random((1, 4, 3, 3)), np.zeros((2, 3, 3, 3)), None, ConvSpec(3, 2))

    def test_rejects_weight_mismatch(self, rng):
        with pytest.raises(ShapeError, match="weight shape"):
            conv2d(rng.random((1, 3, 3, 3)), np.zeros((2, 3, 1, 1)), None, ConvSpec(3, 2))

    def test_rejects_bad_groups(self):
        with pytest.raises(ValueError, match="divisible"):
            ConvSpec(4, 6, groups=4)

    def test_float32_path_stays_float32(self, rng):
        spec = ConvSpec(3, 4)
        out = conv2d(rng.random((1, 3, 4, 4)).astype(np.float32), np.ones(spec.weight_shape, np.float32),
                     np.zeros(4, np.float32), spec)
        assert out.dtype == np.float32


class TestConvBackward:
    def test_weight_gradient_finite_differences(self, rng):
        spec = ConvSpec(3, 4)
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=spec.weight_shape)
        G = rng.normal(size=(1, 4, 5, 5))
        _, gw, _ = conv2d_backward(G, x, w, spec)
        h = 1e-4
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            num[idx] = (np.sum(G * conv2d(x, wp, None, spec)) - np.sum(G * conv2d(x, wm, None, spec))) / (2 * h)
        assert np.max(np.abs(gw - num) / np.maximum(np.abs(num), 1e-8)) < 1e-3

    @pytest.mark.parametrize("groups,stride,hw", [(1, 1, (5, 5)), (2, 2, (6, 7)), (3, 2, (5, 8))])
    def test_dot_product(self, rng, groups, stride, hw):
        spec = ConvSpec(6, 6, stride=stride, groups=groups)
        x = rng.normal(size=(2, 6, *hw))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=6)
        G = rng.normal(size=conv2d(x, w, b, spec).shape)
        gx, gw, gb = conv2d_backward(G, x, w, spec)
        dx, dw, db = rng.normal(size=x.shape), rng.normal(size=w.shape), rng.normal(size=b.shape)
        # conv is bilinear, so the differential is exact
        lhs = np.sum(G * (conv2d(x + dx, w + dw, b + db, spec) - conv2d(x, w, b, spec) - conv2d(dx, dw, None, spec)))
        rhs = np.sum(gx * dx) + np.sum(gw * dw) + np.sum(gb * db)
        assert abs(lhs - rhs) <= 1e-4 * abs(rhs)

    def test_rejects_wrong_grad_shape(self, rng):
        spec = ConvSpec(3, 4)
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((1, 4, 2, 2)), rng.random((1, 3, 5, 5)), np.zeros(spec.weight_shape), spec)


class TestDeconv2d:
    def test_doubles_size(self, rng):
        out = deconv2d(rng.random((1, 2, 4, 4)), rng.random(UP.weight_shape), None, UP)
        assert out.shape == (1, 2, 8, 8)

    def test_zero_in_zero_out(self, rng):
        assert not deconv2d(np.zeros((1, 2, 3, 3)), rng.random(UP.weight_shape), None, UP).any()

    def test_matches_scatter_oracle(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        w = rng.normal(size=UP.weight_shape)
        b = rng.normal(size=2)
        np.testing.assert_allclose(deconv2d(x, w, b, UP), deconv_scatter(x, w, b), atol=1e-5)

    def test_is_adjoint_of_strided_conv(self, rng):
        # deconv weight (in, out, 4, 4) is the conv weight (out', in', 4, 4) of the 2->2 stride-2 conv
        conv = ConvSpec(2, 2, kernel=(4, 4), stride=2, padding=1, has_bias=False)
        w = rng.normal(size=(2, 2, 4, 4))
        x = rng.normal(size=(1, 2, 3, 5))
        y = rng.normal(size=(1, 2, 6, 10))
        lhs = np.sum(deconv2d(x, w, None, UP) * y)
        rhs = np.sum(x * conv2d(y, w, None, conv))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_rejects_other_configurations(self, rng):
        spec = ConvSpec(2, 2, kernel=(3, 3), stride=2, padding=1, transposed=True)
        with pytest.raises(ValueError, match="4x4"):
            deconv2d(rng.random((1, 2, 3, 3)), np.zeros(spec.weight_shape), None, spec)

    def test_dot_product(self, rng):
        x = rng.normal(size=(2, 2, 3, 4))
        w = rng.normal(size=UP.weight_shape)
        b = rng.normal(size=2)
        G = rng.normal(size=(2, 2, 6, 8))
        gx, gw, gb = deconv2d_backward(G, x, w, UP)
        dx, dw, db = rng.normal(size=x.shape), rng.normal(size=w.shape), rng.normal(size=2)
        lhs = np.sum(G * (deconv2d(x + dx, w + dw, b + db, UP) - deconv2d(x, w, b, UP) - deconv2d(dx, dw, None, UP)))
        rhs = np.sum(gx * dx) + np.sum(gw * dw) + np.sum(gb * db)
        assert abs(lhs - rhs) <= 1e-4 * abs(rhs)


class TestAvgPool:
    def test_mean(self):
        out = avgpool2(np.array([1.0, 2, 3, 4], np.float32).reshape(1, 1, 2, 2))
        assert out.shape == (1, 1, 1, 1) and out.item() == 2.5

    def test_constant(self):
        np.testing.assert_array_equal(avgpool2(np.full((1, 3, 4, 6), 0.7, np.float32)), np.full((1, 3, 2, 3), 0.7, np.float32))

    def test_matches_window_loop_exactly(self, rng):
        x = rng.random((1, 64, 8, 8)).astype(np.float32)
        ref = np.zeros((1, 64, 4, 4), np.float32)
        for c in range(64):
            for i in range(4):
                for j in range(4):
                    s = x[0, c, 2 * i, 2 * j] + x[0, c, 2 * i, 2 * j + 1]
                    s = s + x[0, c, 2 * i + 1, 2 * j]
                    s = s + x[0, c, 2 * i + 1, 2 * j + 1]
                    ref[0, c, i, j] = s / np.float32(4)
        np.testing.assert_array_equal(avgpool2(x), ref)

    def test_rejects_odd(self):
        with pytest.raises(ShapeError, match="even"):
            avgpool2(np.zeros((1, 1, 3, 4)))

    def test_backward_spreads_quarter(self):
        g = np.array([[[[4.0]]]])
        np.testing.assert_array_equal(avgpool2_backward(g), np.ones((1, 1, 2, 2)))


class TestLeakyRelu:
    def test_values(self):
        assert leaky_relu(np.array(2.0), 0.1) == 2.0
        assert np.isclose(leaky_relu(np.array(-2.0), 0.1), -0.2)

    def test_slope_one_is_identity(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(leaky_relu(x, 1.0), x)

    def test_backward_positive_passes_through(self, rng):
        x = rng.random((1, 2, 3, 3)) + 0.1
        g = rng.normal(size=x.shape)
        np.testing.assert_array_equal(leaky_relu_backward(g, x, 0.1), g)

    def test_backward_negative_scaled(self):
        assert leaky_relu_backward(np.array(3.0), np.array(-1.0), 0.1) == pytest.approx(0.3)


class TestConcat:
    def test_channel_count(self, rng):
        out = concat_channels([rng.random((1, 32, 3, 4)), rng.random((1, 53, 3, 4)), rng.random((1, 2, 3, 4))])
        assert out.shape == (1, 87, 3, 4)

    def test_single_input_unchanged(self, rng):
        x = rng.random((1, 3, 2, 2))
        np.testing.assert_array_equal(concat_channels([x]), x)

    def test_blocks_preserved(self, rng):
        xs = [rng.random((1, c, 2, 2)) for c in (2, 3)]
        out = concat_channels(xs)
        np.testing.assert_array_equal(out[:, 2 + 1], xs[1][:, 1])

    def test_spatial_mismatch(self, rng):
        with pytest.raises(ShapeError):
            concat_channels([rng.random((1, 2, 3, 3)), rng.random((1, 2, 3, 4))])

    def test_backward_splits(self, rng):
        g = rng.normal(size=(1, 6, 2, 2))
        parts = concat_channels_backward(g, [1, 2, 3])
        assert [p.shape[1] for p in parts] == [1, 2, 3]
        np.testing.assert_array_equal(np.concatenate(parts, axis=1), g)


class TestBilinearResize:
    def test_same_size_bitwise(self, rng):
        x = rng.random((1, 2, 5, 7)).astype(np.float32)
        out = bilinear_resize(x, 5, 7)
        assert out.tobytes() == x.tobytes()

    @pytest.mark.parametrize("size", [(1, 1), (3, 9), (8, 8), (17, 4)])
    def test_constant(self, size):
        out = bilinear_resize(np.full((1, 1, 4, 4), 3.25), *size)
        np.testing.assert_allclose(out, 3.25, rtol=0, atol=1e-12)

    def test_upsample_matches_pixel_oracle(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        np.testing.assert_allclose(bilinear_resize(x, 4, 4)[0, 0], bilinear_pixel(x[0, 0], 4, 4), atol=1e-6)

    def test_random_matches_pixel_oracle(self, rng):
        x = rng.random((1, 1, 5, 6))
        for h, w in ((3, 4), (10, 13), (5, 12)):
            np.testing.assert_allclose(bilinear_resize(x, h, w)[0, 0], bilinear_pixel(x[0, 0], h, w), atol=1e-12)

    def test_up_then_pool_constant(self):
        x = np.full((1, 2, 3, 5), 1.5)
        np.testing.assert_allclose(avgpool2(bilinear_resize(x, 6, 10)), x, atol=1e-12)

    def test_backward_adjoint(self, rng):
        x = rng.normal(size=(1, 2, 4, 5))
        y = rng.normal(size=(1, 2, 7, 3))
        lhs = np.sum(bilinear_resize(x, 7, 3) * y)
        rhs = np.sum(x * bilinear_resize_backward(y, 4, 5))
        assert abs(lhs - rhs) < 1e-10


@settings(max_examples=25, deadline=None)
@given(
    groups=st.sampled_from([1, 2, 3]),
    stride=st.sampled_from([1, 2]),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    seed=st.integers(0, 2 ** 16),
)
def test_conv_backward_dot_product_property(groups, stride, h, w, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(3 * groups, 2 * groups, stride=stride, groups=groups)
    x = rng.normal(size=(1, spec.in_channels, h, w))
    wt = rng.normal(size=spec.weight_shape)
    G = rng.normal(size=conv2d(x, wt, None, spec).shape)
    gx, gw, _ = conv2d_backward(G, x, wt, spec)
    dx = rng.normal(size=x.shape)
    dw = rng.normal(size=wt.shape)
    lhs = np.sum(G * conv2d(dx, wt, None, spec)) + np.sum(G * conv2d(x, dw, None, spec))
    rhs = np.sum(gx * dx) + np.sum(gw * dw)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(rhs))
