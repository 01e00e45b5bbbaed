"""Minimal reverse-mode autodiff on numpy arrays.

Tensors record their parents and a VJP closure as operations run; backward()
topologically sorts the recorded graph from a scalar loss and accumulates
gradients into every tensor that requires them. A no_grad() context skips
recording for inference. Convolution and pooling delegate to the dual-backend
kernels in _kernels.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels as K
from .errors import GraphNotRecorded, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad=False, parents=(), vjp=None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def _needs(self):
        return self.requires_grad or bool(self._parents)

    def backward(self):
        if not self._parents:
            raise GraphNotRecorded(
                "no recorded graph behind this tensor (built under no_grad, "
                "or it is a leaf)")
        if self.values.size != 1:
            raise ValueError("backward starts from a scalar")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._needs():
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype)
        else:
            self.grad += g

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division is not an op; use mul")
        return mul(self, 1.0 / s)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(values, parents, vjp):
    if _grad_enabled and any(p._needs() for p in parents):
        return Tensor(values, parents=parents, vjp=vjp)
    return Tensor(values)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a._needs():
            a._accum(_unbroadcast(g, a.values.shape))
        if b._needs():
            b._accum(_unbroadcast(g, b.values.shape))

    return _make(a.values + b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def vjp(g):
        if a._needs():
            a._accum(_unbroadcast(g * b.values, a.values.shape))
        if b._needs():
            b._accum(_unbroadcast(g * a.values, b.values.shape))

    return _make(values, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape[-1] != b.values.shape[0]:
        raise ShapeMismatch(f"matmul {a.values.shape} @ {b.values.shape}")
    values = a.values @ b.values

    def vjp(g):
        if a._needs():
            a._accum(g @ b.values.T)
        if b._needs():
            b._accum(a.values.T @ g)

    return _make(values, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        a._accum(g.T)

    return _make(a.values.T, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def vjp(g):
        a._accum(g * mask)

    return _make(a.values * mask, (a,), vjp)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.values)

    def vjp(g):
        a._accum(g * sign)

    return _make(np.abs(a.values), (a,), vjp)


def sqrt(a, grad_eps: float = 1e-12) -> Tensor:
    """Element-wise square root; the VJP denominator is floored so zero
    distances do not produce infinite gradients."""
    a = as_tensor(a)
    root = np.sqrt(a.values)

    def vjp(g):
        a._accum(g / (2.0 * np.maximum(root, grad_eps)))

    return _make(root, (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.values.shape))

    return _make(values, (a,), vjp)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.values.shape

    def vjp(g):
        a._accum(g.reshape(orig))

    return _make(a.values.reshape(shape), (a,), vjp)


def dropout(a, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.values.shape) >= rate).astype(a.values.dtype)
    scale = 1.0 / (1.0 - rate)
    return mul(a, Tensor(keep * scale))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=axis, keepdims=True))
    values = shift - lse
    soft = np.exp(values)

    def vjp(g):
        a._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(values, (a,), vjp)


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] as a 1-D tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def vjp(g):
        full = np.zeros_like(a.values)
        np.add.at(full, (rows, cols), g)
        a._accum(full)

    return _make(a.values[rows, cols], (a,), vjp)


def conv2d(x, w) -> Tensor:
    """3x3 same convolution; x (N,C,H,W), w (CO,C,3,3)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 4 or w.values.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv2d got x{x.values.shape} w{w.values.shape}")
    if x.values.shape[1] != w.values.shape[1]:
        raise ShapeMismatch("channel mismatch")
    values = K.conv2d_forward(x.values, w.values)

    def vjp(g):
        g = np.ascontiguousarray(g)
        dx, dw = K.conv2d_backward(x.values, w.values, g)
        if x._needs():
            x._accum(dx)
        if w._needs():
            w._accum(dw)

    return _make(values, (x, w), vjp)


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    values, idx = K.maxpool2_forward(x.values)
    H, W = x.values.shape[2], x.values.shape[3]

    def vjp(g):
        x._accum(K.maxpool2_backward(idx, np.ascontiguousarray(g), H, W))

    return _make(values, (x,), vjp)
