# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend: the gather/scatter loops that dominate CPU
time outside of BLAS. Contracts match ``_numpy.py`` exactly; columns
are laid out (N, C*kh*kw, OH*OW) so reads and writes stay sequential."""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def im2col(x, int kh, int kw, int stride, int pad):
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, int n, int c, int h, int w, int kh, int kw, int stride, int pad):
    return _col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)


def maxpool_forward(x, int window, int stride, int pad):
    return _maxpool_forward(np.ascontiguousarray(x), window, stride, pad)


def maxpool_backward(g, idx, int h, int w):
    return _maxpool_backward(np.ascontiguousarray(g), np.ascontiguousarray(idx), h, w)


def _im2col(const floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c * kh * kw, oh * ow),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] cols = out_arr
    cdef Py_ssize_t b, ci, ki, kj, oi, oj, row, ii, jj, base
    for b in range(n):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ci * kh + ki) * kw + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * ow
                        if stride == 1:
                            for oj in range(max(0, pad - kj),
                                            min(ow, w + pad - kj)):
                                cols[b, row, base + oj] = x[b, ci, ii, oj + kj - pad]
                        else:
                            for oj in range(ow):
                                jj = oj * stride + kj - pad
                                if 0 <= jj < w:
                                    cols[b, row, base + oj] = x[b, ci, ii, jj]
    return out_arr


def _col2im(const floating[:, :, ::1] cols, int n, int c, int h, int w,
            int kh, int kw, int stride, int pad):
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] dx = out_arr
    cdef Py_ssize_t b, ci, ki, kj, oi, oj, row, ii, jj, base
    for b in range(n):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ci * kh + ki) * kw + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * ow
                        if stride == 1:
                            for oj in range(max(0, pad - kj),
                                            min(ow, w + pad - kj)):
                                dx[b, ci, ii, oj + kj - pad] += cols[b, row, base + oj]
                        else:
                            for oj in range(ow):
                                jj = oj * stride + kj - pad
                                if 0 <= jj < w:
                                    dx[b, ci, ii, jj] += cols[b, row, base + oj]
    return out_arr


def _maxpool_forward(const floating[:, :, :, ::1] x, int window, int stride, int pad):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int oh = (h + 2 * pad - window) // stride + 1
    cdef int ow = (w + 2 * pad - window) // stride + 1
    out_arr = np.empty((n, c, oh, ow),
                       dtype=np.float32 if floating is float else np.float64)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ci, oi, oj, ki, kj, ii, jj, best_idx
    cdef floating best
    cdef bint seen
    for b in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    seen = False
                    best = 0
                    best_idx = 0
                    for ki in range(window):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(window):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= w:
                                continue
                            if not seen or x[b, ci, ii, jj] > best:
                                seen = True
                                best = x[b, ci, ii, jj]
                                best_idx = ii * w + jj
                    out[b, ci, oi, oj] = best
                    idx[b, ci, oi, oj] = best_idx
    return out_arr, idx_arr


def _maxpool_backward(const floating[:, :, :, ::1] g, const cnp.int64_t[:, :, :, ::1] idx,
                      int h, int w):
    cdef int n = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    out_arr = np.zeros((n, c, h * w),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] dx = out_arr
    cdef Py_ssize_t b, ci, oi, oj
    for b in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    dx[b, ci, idx[b, ci, oi, oj]] += g[b, ci, oi, oj]
    return out_arr.reshape(n, c, h, w)
