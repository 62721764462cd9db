"""Pure-numpy kernel backend.

Same contracts as the compiled core in ``_core.pyx``; used when the
extension is unavailable or when RESATTN_KERNELS=numpy.

Column layout is per-image channel-major: ``(N, C*kh*kw, OH*OW)`` so a
convolution is one batched GEMM with no output transpose.
"""

import numpy as np

BACKEND = "numpy"


def im2col(x, kh, kw, stride, pad):
    """Unfold conv windows of ``x`` (N,C,H,W) into (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Scatter-add (N, C*kh*kw, OH*OW) columns back to (N,C,H,W)."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[
                :, :, ki, kj
            ]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, window, stride, pad):
    """Max over windows. Returns (out, argmax) where argmax holds the flat
    h*W+w index (into the unpadded input) of the first maximum in
    row-major window scan order."""
    n, c, h, w = x.shape
    if pad:
        xp = np.full(
            (n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype
        )
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, window, window),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n, c, oh, ow, window * window)
    k = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    # Window-local index -> padded coords -> unpadded flat index.
    base_i = np.arange(oh)[:, None] * stride
    base_j = np.arange(ow)[None, :] * stride
    hi = base_i[None, None] + k // window - pad
    wj = base_j[None, None] + k % window - pad
    idx = (hi * w + wj).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool_backward(g, idx, h, w):
    """Route each output gradient to its argmax input position."""
    n, c = g.shape[:2]
    dx = np.zeros((n * c, h * w), dtype=g.dtype)
    rows = np.repeat(np.arange(n * c), idx.shape[2] * idx.shape[3])
    np.add.at(dx, (rows, idx.reshape(-1)), g.reshape(-1))
    return dx.reshape(n, c, h, w)
