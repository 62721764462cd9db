"""Differentiable primitives over `Tensor`.

Every op checks shapes on entry, computes forward with numpy (hot
gather/scatter loops go through the kernels backend), and records a
backward rule that accumulates into input grads. ``gradcheck`` is the
independent finite-difference oracle used to validate each rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, no_grad, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
L2_EPS = 1e-12
STD_EPS = 1e-12


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def mul(a, b):
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


# Debug hook: when set, relu's backward rule is deliberately wrong so
# negative-control gradchecks can prove the oracle catches bad rules.
_CORRUPT_BACKWARD = False


def set_debug_corrupt_backward(enabled):
    global _CORRUPT_BACKWARD
    _CORRUPT_BACKWARD = bool(enabled)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    xd = x.data
    scale = 1.25 if _CORRUPT_BACKWARD else 1.0
    return record("relu", (x,), out, lambda g: (scale * g * (xd > 0),))


def sigmoid(x):
    # stable both directions: exponent argument is never positive
    pos = x.data >= 0
    ez = np.exp(np.where(pos, -x.data, x.data))
    y = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    out = Tensor(y)
    return record("sigmoid", (x,), out, lambda g: (g * y * (1.0 - y),))


def tensor_sum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    shape = x.data.shape
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# convolution / pooling / resize


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NCHW input with (Cout,Cin,kH,kW) filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input has {cin} channels but weight expects {cin_w}"
        )
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        src = x.data if stride == 1 else np.ascontiguousarray(
            x.data[:, :, ::stride, ::stride]
        )
        cols = src.reshape(n, cin, oh * ow)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)  # (N, CKK, OHW)
    wmat = w.data.reshape(cout, cin * kh * kw)
    # the explicit [None] makes numpy dispatch one batched BLAS gemm
    y = np.matmul(wmat[None], cols)  # (N, Cout, OHW)
    y.shape = (n, cout, oh, ow)
    out = Tensor(y)

    def backward(g):
        gm = g.reshape(n, cout, oh * ow)
        dx = dw = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T[None], gm)
            if pointwise:
                dcols.shape = (n, cin, oh, ow)
                if stride == 1:
                    dx = dcols
                else:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dcols
            else:
                dx = kernels.col2im(dcols, n, cin, h, wd, kh, kw, stride, padding)
        if w.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        return dx, dw

    return record("conv2d", (x, w), out, backward)


def max_pool2d(x, window, stride, padding=0):
    if x.ndim != 4:
        raise ShapeError("max_pool2d expects a 4-d input")
    n, c, h, w = x.data.shape
    if window < 1:
        raise ShapeError("max_pool2d: window must be >= 1")
    if padding >= window:
        raise ShapeError("max_pool2d: padding must be smaller than window")
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(
            f"max_pool2d: window {window} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    y, idx = kernels.maxpool_forward(x.data, window, stride, padding)
    out = Tensor(y)
    return record(
        "max_pool2d", (x,), out, lambda g: (kernels.maxpool_backward(g, idx, h, w),)
    )


def _interp_matrix(src, dst, dtype):
    """Row-stochastic align-corners interpolation matrix (dst x src)."""
    m = np.zeros((dst, src), dtype=dtype)
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    scale = (src - 1) / (dst - 1)
    pos = np.arange(dst, dtype=np.float64) * scale
    lo = np.minimum(pos.astype(np.int64), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] = frac
    return m


def bilinear_upsample(x, out_h, out_w):
    """Align-corners bilinear resize to (out_h, out_w); linear in x."""
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample expects a 4-d input")
    n, c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_upsample: target extents must be positive")
    if out_h < h or out_w < w:
        raise ShapeError(
            f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}"
        )
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    y = np.matmul(ah, np.matmul(x.data, aw.T))
    out = Tensor(y)
    return record(
        "bilinear_upsample",
        (x,),
        out,
        lambda g: (np.ascontiguousarray(np.matmul(ah.T, np.matmul(g, aw))),),
    )


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-d input")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.dtype).copy(),)

    return record("global_avg_pool", (x,), out, backward)


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BNState:
    """Per-channel running statistics, updated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, state, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Channel-wise normalization; population statistics in train mode."""
    if x.ndim != 4:
        raise ShapeError("batch_norm expects a 4-d input")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    m = n * h * w
    if training:
        if m < 2:
            raise ShapeError("batch_norm: train mode needs batch*spatial >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        # E[x^2] - mean^2, clamped against f32 rounding; avoids a
        # full-size centered temporary
        var = np.einsum("nchw,nchw->c", x.data, x.data) / m - mean * mean
        var = np.maximum(var, 0.0)
        state.mean = (momentum * state.mean + (1.0 - momentum) * mean).astype(state.mean.dtype)
        state.var = (momentum * state.var + (1.0 - momentum) * var).astype(state.var.dtype)
    else:
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    shift = beta.data - mean * scale
    y = x.data * scale[None, :, None, None]
    y += shift[None, :, None, None]
    out = Tensor(y)

    def backward(g):
        # xhat is never materialized: dgamma and the dx correction are
        # expressed through sums over g and raw x
        gsum = g.sum(axis=(0, 2, 3))
        gx = np.einsum("nchw,nchw->c", g, x.data)
        ghat = (gx - gsum * mean) * inv_std  # == sum(g * xhat)
        dgamma = ghat.astype(gamma.dtype, copy=False) if gamma.requires_grad else None
        dbeta = gsum.astype(beta.dtype, copy=False) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gs = gamma.data * inv_std
            if training:
                # dx = gs*(g - gsum/m - xhat*ghat/m) with xhat expanded
                b = gs * ghat * inv_std / m
                a = gs * gsum / m - b * mean
                dx = g * gs[None, :, None, None]
                dx -= x.data * b[None, :, None, None]
                dx -= a[None, :, None, None]
            else:
                dx = g * gs[None, :, None, None]
            dx = dx.astype(x.dtype, copy=False)
        return dx, dgamma, dbeta

    return record("batch_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# dense head


def fully_connected(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("fully_connected expects x:(N,Cin) w:(Cout,Cin) b:(Cout,)")
    n, cin = x.data.shape
    cout, cin_w = w.data.shape
    if cin != cin_w or b.data.shape[0] != cout:
        raise ShapeError(
            f"fully_connected: x has {cin} features, weight expects {cin_w}"
        )
    out = Tensor(x.data @ w.data.T + b.data)

    def backward(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return record("fully_connected", (x, w, b), out, backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood; max-subtracted softmax."""
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects 2-d logits")
    n, k = logits.data.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: need {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n).astype(logits.dtype), None

    return record("softmax_cross_entropy", (logits, labels), out, backward)


# ---------------------------------------------------------------------------
# mask activations


def channel_l2norm(x):
    """Scale each spatial position's channel vector to unit L2 norm."""
    if x.ndim != 4:
        raise ShapeError("channel_l2norm expects a 4-d input")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, L2_EPS)
    y = x.data / norm
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm,)

    return record("channel_l2norm", (x,), out, backward)


def spatial_standardize(x):
    """Zero-mean unit-std (population) per channel map of each sample."""
    if x.ndim != 4:
        raise ShapeError("spatial_standardize expects a 4-d input")
    n, c, h, w = x.data.shape
    if h * w < 2:
        raise ShapeError("spatial_standardize: spatial population must be >= 2")
    m = h * w
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + STD_EPS)
    y = (x.data - mean) * inv_std
    out = Tensor(y)

    def backward(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gy = (g * y).sum(axis=(2, 3), keepdims=True)
        return ((inv_std * (g - gsum / m - y * gy / m)).astype(x.dtype),)

    return record("spatial_standardize", (x,), out, backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradcheckReport:
    """Per-input maximum relative error between analytic and numeric grads."""

    passed: bool
    tol: float
    step: float
    errors: list = field(default_factory=list)  # (name, max_rel_err)

    @property
    def max_error(self):
        return max((e for _, e in self.errors), default=0.0)

    def __str__(self):
        lines = [
            f"  {name}: max rel err {err:.3e}" for name, err in self.errors
        ]
        status = "PASS" if self.passed else "FAIL"
        return "\n".join([f"gradcheck {status} (tol {self.tol:g}, step {self.step:g})"] + lines)


def gradcheck(f, inputs, step=1e-3, tol=1e-4, max_entries=None, rng=None):
    """Compare analytic gradients of scalar-valued ``f`` against central
    finite differences, in float64.

    ``f`` takes the list of tensors and returns a scalar Tensor. With
    ``max_entries`` set, a deterministic random subset of each input's
    entries is perturbed instead of all of them.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    inputs64 = [
        Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad, name=t.name)
        for t in inputs
    ]
    out = f(inputs64)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("gradcheck requires a scalar-valued function")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in inputs64
    ]

    report = GradcheckReport(passed=True, tol=tol, step=step)
    with no_grad():
        for i, t in enumerate(inputs64):
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            n = flat.size
            if max_entries is not None and n > max_entries:
                entries = rng.choice(n, size=max_entries, replace=False)
            else:
                entries = np.arange(n)
            worst = 0.0
            for j in entries:
                orig = flat[j]
                flat[j] = orig + step
                f_plus = f(inputs64).data.item()
                flat[j] = orig - step
                f_minus = f(inputs64).data.item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = analytic[i].reshape(-1)[j]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err > worst:
                    worst = err
            name = t.name or f"input[{i}]"
            report.errors.append((name, worst))
            if worst >= tol:
                report.passed = False
    return report
