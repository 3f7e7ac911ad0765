import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsseg import nn_ops
from dsseg.gradcheck import ALL_OPS, check_function, grad_check
from dsseg.tensor import ShapeError, Tensor


def T(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


class TestConv3d:
    def test_identity_kernel(self):
        x = T(np.random.default_rng(0).standard_normal((1, 3, 3, 3)))
        k = T(np.ones((1, 1, 1, 1, 1)))
        b = T(np.zeros(1))
        out = nn_ops.conv3d(x, k, b)
        assert np.allclose(out.values, x.values)

    def test_all_ones_kernel_interior_counts_taps(self):
        x = T(np.ones((1, 5, 5, 5)))
        k = T(np.ones((1, 1, 3, 3, 3)))
        b = T(np.zeros(1))
        out = nn_ops.conv3d(x, k, b, padding=1)
        assert out.values[0, 2, 2, 2] == pytest.approx(27.0)
        assert out.values[0, 0, 0, 0] == pytest.approx(8.0)  # corner

    def test_non_integral_output_extent_raises(self):
        x = T(np.ones((1, 4, 4, 4)))
        k = T(np.ones((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="non-integral"):
            nn_ops.conv3d(x, k, T(np.zeros(1)), stride=2)

    def test_channel_mismatch_raises(self):
        x = T(np.ones((2, 4, 4, 4)))
        k = T(np.ones((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channels"):
            nn_ops.conv3d(x, k, T(np.zeros(1)))

    def test_even_kernel_raises(self):
        x = T(np.ones((1, 4, 4, 4)))
        k = T(np.ones((1, 1, 2, 2, 2)))
        with pytest.raises(ShapeError, match="odd"):
            nn_ops.conv3d(x, k, T(np.zeros(1)))

    def test_gradient_matches_finite_differences(self):
        assert grad_check("conv3d", seed=0, tol=1e-5).passed


class TestConvTranspose3d:
    def test_single_voxel_scatter(self):
        v = 1.7
        x = T(np.full((1, 1, 1, 1), v))
        k = T(np.ones((1, 1, 2, 2, 2)))
        out = nn_ops.conv_transpose3d(x, k, T(np.zeros(1)), stride=2)
        assert out.shape == (1, 2, 2, 2)
        assert np.allclose(out.values, v)

    def test_output_extent_formula(self):
        x = T(np.ones((1, 3, 3, 3)))
        k = T(np.ones((1, 1, 2, 2, 2)))
        out = nn_ops.conv_transpose3d(x, k, T(np.zeros(1)), stride=2)
        assert out.shape == (1, 6, 6, 6)

    def test_channel_mismatch_raises(self):
        x = T(np.ones((2, 2, 2, 2)))
        k = T(np.ones((1, 1, 2, 2, 2)))
        with pytest.raises(ShapeError, match="channels"):
            nn_ops.conv_transpose3d(x, k, T(np.zeros(1)))

    def test_gradient_matches_finite_differences(self):
        assert grad_check("conv_transpose3d", seed=0, tol=1e-5).passed


class TestMaxpool3d:
    def test_block_maximum(self):
        x = T(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
        out = nn_ops.maxpool3d(x)
        assert out.values[0, 0, 0, 0] == pytest.approx(8.0)

    def test_constant_input_tie_breaks_to_first(self):
        x = T(np.full((1, 2, 2, 2), 3.0), requires_grad=True)
        nn_ops.maxpool3d(x).sum().backward()
        assert x.grad[0, 0, 0, 0] == pytest.approx(1.0)
        assert x.grad.sum() == pytest.approx(1.0)

    def test_indivisible_extent_raises(self):
        with pytest.raises(ShapeError, match="maxpool3d"):
            nn_ops.maxpool3d(T(np.ones((1, 3, 4, 4))))

    def test_gradient_matches_finite_differences(self):
        assert grad_check("maxpool3d", seed=0, tol=1e-5).passed


class TestDense:
    def test_identity(self):
        x = T([1.0, 2.0, 3.0])
        out = nn_ops.dense(x, T(np.eye(3)), T(np.zeros(3)))
        assert np.allclose(out.values, x.values)

    def test_affine_arithmetic(self):
        out = nn_ops.dense(T([1.0, 2.0]), T([[1.0, 1.0]]), T([0.5]))
        assert out.values[0] == pytest.approx(3.5)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ShapeError, match="dense"):
            nn_ops.dense(T([1.0, 2.0, 3.0]), T([[1.0, 1.0]]), T([0.0]))

    def test_gradient_matches_finite_differences(self):
        assert grad_check("dense", seed=0, tol=1e-6).passed


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = nn_ops.softmax(T([0.0, 0.0, 0.0]))
        assert np.allclose(out.values, 1 / 3)

    def test_known_values(self):
        out = nn_ops.softmax(T([1.0, 2.0, 3.0]))
        assert np.allclose(out.values, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_shift_invariance(self):
        x = np.random.default_rng(1).standard_normal(5)
        a = nn_ops.softmax(T(x)).values
        b = nn_ops.softmax(T(x + 17.3)).values
        assert np.allclose(a, b, atol=1e-12)

    def test_invalid_axis_raises(self):
        with pytest.raises(ShapeError, match="axis"):
            nn_ops.softmax(T([1.0]), axis=3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6), st.integers(1, 4))
    def test_sums_to_one(self, seed, n, m):
        x = np.random.default_rng(seed).standard_normal((n, m)) * 10
        out = nn_ops.softmax(T(x), axis=0)
        assert np.allclose(out.values.sum(axis=0), 1.0, atol=1e-6)


class TestGradcheckSuite:
    @pytest.mark.parametrize("op", ALL_OPS)
    def test_primitive_passes(self, op):
        report = grad_check(op, seed=0)
        assert report.passed, str(report)

    def test_corrupted_backward_fails(self):
        # negative control: a deliberately wrong backward must be caught
        def bad_square(ts):
            x = ts[0]
            out = Tensor._make(x.values ** 2, "bad_square", (x,),
                               lambda g: (g * 3.0 * x.values,))  # wrong factor
            return out.sum()

        x = np.random.default_rng(0).standard_normal(4)
        report = check_function("bad_square", bad_square, [x], tol=1e-4)
        assert not report.passed


def test_dropout_identity_when_off():
    x = T(np.ones((2, 4, 4, 4)))
    rng = np.random.default_rng(0)
    assert nn_ops.dropout(x, 0.5, rng, training=False) is x
    assert nn_ops.dropout(x, 0.0, rng, training=True) is x


def test_dropout_scales_kept_voxels():
    x = T(np.ones(10000))
    out = nn_ops.dropout(x, 0.5, np.random.default_rng(0), training=True)
    kept = out.values[out.values > 0]
    assert np.allclose(kept, 2.0)
    assert abs(len(kept) / 10000 - 0.5) < 0.05


def test_spatial_mean():
    x = T(np.stack([np.full((2, 2, 2), 3.0), np.arange(8.0).reshape(2, 2, 2)]))
    out = nn_ops.spatial_mean(x)
    assert np.allclose(out.values, [3.0, 3.5])
