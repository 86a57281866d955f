import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowup import ops
from flowup.errors import DimensionError
from flowup.gradcheck import run_suite, suite_names
from flowup.tensor import Tensor, default_dtype

MODULE_CHECKS = {"nat_block", "tcu_step", "tcu_reduced", "context_encoder"}
OP_CHECKS = [n for n in suite_names() if n not in MODULE_CHECKS]


def naive_conv(x, w, b, stride, pad):
    """Direct sliding-window cross-correlation."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((1, 6, 7)).astype(np.float32)
        y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_counting_kernel(self):
        y = ops.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), None, stride=1, pad=1)
        assert y.data[0, 2, 2] == 9.0
        assert y.data[0, 0, 0] == 4.0

    def test_stride2_against_oracle(self, rng):
        x = rng.standard_normal((3, 5, 5))
        w = rng.standard_normal((1, 3, 3, 3))
        y = ops.conv2d(Tensor(x), Tensor(w), None, stride=2, pad=0)
        assert y.shape == (1, 2, 2)
        np.testing.assert_allclose(y.data, naive_conv(x, w, None, 2, 0), atol=1e-5)

    @pytest.mark.parametrize("c,o,size,k,stride,pad", [
        (8, 4, 32, 3, 1, 1), (3, 5, 17, 7, 2, 3), (4, 2, 12, 5, 3, 2), (6, 6, 9, 1, 1, 0), (2, 3, 10, 1, 2, 0),
    ])
    def test_matches_naive_oracle(self, rng, c, o, size, k, stride, pad):
        x = rng.standard_normal((c, size, size)).astype(np.float32)
        w = rng.standard_normal((o, c, k, k)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), atol=1e-4, rtol=1e-5)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_bias_shape_checked(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


class TestSoftmax:
    @pytest.mark.parametrize("logits,expected", [
        ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
        ([0.0, np.log(3.0)], [0.25, 0.75]),
        ([1000.0, 0.0], [1.0, 0.0]),
    ])
    def test_examples(self, logits, expected):
        with default_dtype(np.float64):
            out = ops.softmax(Tensor(logits), axis=0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_nan_propagates(self):
        out = ops.softmax(Tensor([np.nan, 1.0]), axis=0).data
        assert np.isnan(out).all()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_positive_and_normalised(self, values):
        out = ops.softmax(Tensor(np.array(values, dtype=np.float32)), axis=0).data
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-6

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            ops.softmax(Tensor(np.zeros((2, 3))), axis=2)


class TestElementwiseAndShape:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_concat_shapes(self):
        out = ops.concat([Tensor(np.zeros((2, 4, 4))), Tensor(np.ones((3, 4, 4)))], axis=0)
        assert out.shape == (5, 4, 4)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ops.concat([Tensor(np.zeros((2, 4, 4))), Tensor(np.ones((3, 4, 5)))], axis=0)

    def test_reshape_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(ops.reshape(Tensor(x, dtype=np.float64), (6, 4)).data, x.reshape(6, 4))

    def test_linear_1x1_matches_einsum(self, rng):
        x, w = rng.standard_normal((3, 4, 5)), rng.standard_normal((2, 3))
        np.testing.assert_allclose(ops.linear_1x1(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data,
                                   np.einsum("oc,chw->ohw", w, x))

    def test_layer_norm_normalises_channels(self, rng):
        x = Tensor(rng.standard_normal((8, 3, 3)) * 5 + 2, dtype=np.float64)
        y = ops.layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-3)

    def test_avg_downsample(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        np.testing.assert_allclose(ops.avg_downsample(Tensor(x, dtype=np.float64), 2).data,
                                   [[[2.5, 4.5], [10.5, 12.5]]])

    def test_pixel_shuffle_layout(self):
        x = np.arange(4, dtype=np.float32).reshape(4, 1, 1, 1)
        np.testing.assert_array_equal(ops.pixel_shuffle(Tensor(x), 2).data, [[[0, 1], [2, 3]]])


class TestBilinearResize:
    @pytest.mark.parametrize("size", [(3, 5), (8, 8), (13, 2), (4, 6)])
    def test_constant_preserved(self, size):
        x = Tensor(np.full((2, 4, 6), 3.25), dtype=np.float64)
        np.testing.assert_allclose(ops.bilinear_resize(x, size).data, 3.25, atol=1e-12)

    def test_flow_values_scale_with_ratio(self):
        x = Tensor(np.stack([np.ones((4, 4)), np.ones((4, 4))]), dtype=np.float64)
        y = ops.bilinear_resize(x, (6, 8), flow=True).data
        np.testing.assert_allclose(y[0], 2.0)
        np.testing.assert_allclose(y[1], 1.5)

    def test_identity_size(self, rng):
        x = rng.standard_normal((2, 5, 7))
        np.testing.assert_allclose(ops.bilinear_resize(Tensor(x, dtype=np.float64), (5, 7)).data, x, atol=1e-12)


@pytest.mark.parametrize("name", OP_CHECKS)
def test_gradcheck_op(name):
    (result,) = run_suite([name])
    assert result.passed(1e-5), f"{name}: {result.max_rel_error:.3e}"
