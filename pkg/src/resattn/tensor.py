"""Dense tensors with reverse-mode automatic differentiation.

A global tape records one TapeNode per differentiable op in forward
order; ``backward()`` walks it once in reverse, accumulating (never
overwriting) gradients into the inputs. Layout for feature maps is
N x C x H x W throughout.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional array plus optional same-shape gradient storage."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, fresh=False):
        """Add ``g`` into the stored gradient. ``fresh`` promises that
        ``g`` is an owned array nobody else will mutate, letting the
        first accumulation adopt it without a copy."""
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, free=True):
        """Reverse-mode pass from this (scalar) tensor through the tape.

        ``free=True`` releases intermediate gradients and saved buffers
        as soon as they are consumed, and clears the tape afterwards.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        self.grad = np.ones_like(self.data)
        for node in reversed(_TAPE):
            out = node.output
            if out.grad is None:
                continue
            grads = node.backward(out.grad)
            adopted = set()
            for t, g in zip(node.inputs, grads):
                if g is not None and isinstance(t, Tensor) and t.requires_grad:
                    fresh = (
                        isinstance(g, np.ndarray)
                        and g.base is None
                        and g is not out.grad
                        and id(g) not in adopted
                    )
                    t.accumulate_grad(g, fresh=fresh)
                    if fresh:
                        adopted.add(id(g))
            if free:
                if out is not self:
                    out.grad = None
                node.release()
        if free:
            clear_tape()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def release(self):
        self.backward = None


_TAPE: list[TapeNode] = []
_grad_enabled = True


def grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size():
    return len(_TAPE)


def clear_tape():
    _TAPE.clear()


def record(op, inputs, output, backward):
    """Push a TapeNode if grads are enabled and any input needs one.

    Marks the output as requiring grad so downstream ops keep tracking.
    """
    if not _grad_enabled:
        return output
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    _TAPE.append(TapeNode(op, inputs, output, backward))
    return output


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
