import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsseg import _kernels_py, kernels


def reference_im2col(x, k, stride):
    """Direct per-position gather, the slowest possible oracle."""
    c, d, h, w = x.shape
    do = (d - k) // stride + 1
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = np.empty((c * k * k * k, do * ho * wo), dtype=x.dtype)
    pos = 0
    for z in range(do):
        for y in range(ho):
            for xx in range(wo):
                block = x[:, z * stride:z * stride + k,
                          y * stride:y * stride + k,
                          xx * stride:xx * stride + k]
                cols[:, pos] = block.reshape(-1)
                pos += 1
    return cols


class TestNumpyFallback:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 3]),
           st.sampled_from([1, 2]))
    def test_im2col_matches_reference(self, seed, k, stride):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 5, 5, 5))
        got = _kernels_py.im2col3d(x, k, stride)
        assert np.array_equal(got, reference_im2col(x, k, stride))

    def test_col2im_is_adjoint_of_im2col(self):
        # <im2col(x), c> == <x, col2im(c)> for random x, c
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 6, 6, 6))
        cols = _kernels_py.im2col3d(x, 3, 1)
        c = rng.standard_normal(cols.shape)
        lhs = float(np.sum(cols * c))
        rhs = float(np.sum(x * _kernels_py.col2im3d(c, 2, 6, 6, 6, 3, 1)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


needs_ext = pytest.mark.skipif(kernels.BACKEND != "cython",
                               reason="compiled extension not built")


@needs_ext
class TestBackendEquivalence:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (2, 2)])
    def test_im2col_bit_identical(self, dtype, k, stride):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 6, 6, 6)).astype(dtype)
        assert np.array_equal(kernels.im2col3d(x, k, stride),
                              _kernels_py.im2col3d(x, k, stride))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k,stride", [(3, 1), (2, 2)])
    def test_col2im_bit_identical(self, dtype, k, stride):
        rng = np.random.default_rng(2)
        d = h = w = 6
        do = (d - k) // stride + 1
        cols = rng.standard_normal((2 * k ** 3, do ** 3)).astype(dtype)
        got = kernels.col2im3d(cols, 2, d, h, w, k, stride)
        want = _kernels_py.col2im3d(cols, 2, d, h, w, k, stride)
        assert np.allclose(got, want, atol=0, rtol=1e-6)
        assert got.dtype == want.dtype


def test_backend_identifies_itself():
    assert kernels.BACKEND in ("cython", "numpy")
