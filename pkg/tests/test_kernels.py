"""Parity between the compiled kernel core and the numpy fallback."""

import numpy as np
import pytest

from resattn import kernels

try:
    CY = kernels.get_backend("cython")
except ImportError:
    CY = None
NP = kernels.get_backend("numpy")

needs_core = pytest.mark.skipif(CY is None, reason="compiled core not built")

CONV_CASES = [(3, 3, 1, 0), (3, 3, 2, 1), (1, 1, 1, 0), (1, 1, 2, 0), (7, 7, 1, 3), (5, 3, 2, 2)]
POOL_CASES = [(2, 2, 0), (3, 2, 1), (3, 1, 0), (2, 1, 1)]


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("kh,kw,stride,pad", CONV_CASES)
def test_im2col_parity(rng, dtype, kh, kw, stride, pad):
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    a = NP.im2col(x, kh, kw, stride, pad)
    b = CY.im2col(x, kh, kw, stride, pad)
    assert a.shape == b.shape and a.dtype == b.dtype
    np.testing.assert_array_equal(a, b)


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("kh,kw,stride,pad", CONV_CASES)
def test_col2im_parity(rng, dtype, kh, kw, stride, pad):
    shape = (2, 3, 9, 8)
    x = rng.standard_normal(shape).astype(dtype)
    cols = rng.standard_normal(NP.im2col(x, kh, kw, stride, pad).shape).astype(dtype)
    a = NP.col2im(cols, *shape, kh, kw, stride, pad)
    b = CY.col2im(cols, *shape, kh, kw, stride, pad)
    # accumulation order differs between backends
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), c> == <x, col2im(c)> pins the scatter indexing
    shape = (2, 2, 6, 7)
    x = rng.standard_normal(shape)
    cols_shape = NP.im2col(x, 3, 3, 2, 1).shape
    c = rng.standard_normal(cols_shape)
    lhs = (NP.im2col(x, 3, 3, 2, 1) * c).sum()
    rhs = (x * NP.col2im(c, *shape, 3, 3, 2, 1)).sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("window,stride,pad", POOL_CASES)
def test_maxpool_parity(rng, dtype, window, stride, pad):
    x = rng.standard_normal((2, 3, 8, 9)).astype(dtype)
    ya, ia = NP.maxpool_forward(x, window, stride, pad)
    yb, ib = CY.maxpool_forward(x, window, stride, pad)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(ia, ib)
    g = rng.standard_normal(ya.shape).astype(dtype)
    da = NP.maxpool_backward(g, ia, 8, 9)
    db = CY.maxpool_backward(g, ib, 8, 9)
    np.testing.assert_allclose(da, db, rtol=1e-6, atol=1e-7)


@needs_core
def test_maxpool_tiebreak_first_in_scan_order():
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    for backend in (NP, CY):
        _, idx = backend.maxpool_forward(x, 2, 2, 0)
        np.testing.assert_array_equal(idx.reshape(2, 2), [[0, 2], [8, 10]])


def test_backend_selection_reports_name():
    assert kernels.BACKEND in ("cython", "numpy")
