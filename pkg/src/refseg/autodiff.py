"""Reverse-mode automatic differentiation on float64 numpy arrays.

Everything in this package that needs gradients is built from the small set
of primitives below.  A `Tensor` wraps an ndarray and remembers how it was
produced; calling `backward()` on a scalar walks the tape in reverse
topological order and accumulates gradients into every reachable leaf with
`requires_grad=True`.

The engine is deliberately tiny: no views-with-write semantics, no in-place
ops, float64 only.  That keeps gradients exactly reproducible, which the
finite-difference test suite relies on.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _np_erf
from scipy.special import expit as _np_expit

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (used at eval time)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        """Backpropagate from this tensor; `grad` defaults to ones (scalars)."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64) if self.grad is None \
            else self.grad + grad
        for node in reversed(_topo_order(self)):
            if node._backward is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), bw)


# transcendental -----------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        _acc(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def erf(a):
    a = as_tensor(a)
    two_over_sqrt_pi = 2.0 / np.sqrt(np.pi)

    def bw(g):
        _acc(a, g * two_over_sqrt_pi * np.exp(-a.data * a.data))

    return _make(_np_erf(a.data), (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_data = _np_expit(a.data)

    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)

    def bw(g):
        _acc(a, g * _np_expit(a.data))

    return _make(np.logaddexp(0.0, a.data), (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0

    def bw(g):
        _acc(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def gelu(a):
    """Gaussian-error nonlinearity: 0.5*x*(1 + erf(x/sqrt(2)))."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _np_erf(x / np.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _acc(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), bw)


# reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def getitem(a, key):
    a = as_tensor(a)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        _acc(a, buf)

    return _make(a.data[key], (a,), bw)


def take_flat(a, flat_idx: np.ndarray, out_shape: tuple):
    """Gather from the flattened input; duplicated indices are allowed."""
    a = as_tensor(a)
    flat_idx = np.asarray(flat_idx)

    def bw(g):
        buf = np.bincount(flat_idx.reshape(-1), weights=g.reshape(-1),
                          minlength=a.data.size)
        _acc(a, buf.reshape(a.data.shape))

    return _make(a.data.reshape(-1)[flat_idx].reshape(out_shape), (a,), bw)


def pad2d(a, pad: int):
    """Zero-pad the two leading spatial axes of an (H, W, C) tensor."""
    a = as_tensor(a)

    def bw(g):
        _acc(a, g[pad:-pad, pad:-pad, :])

    return _make(np.pad(a.data, ((pad, pad), (pad, pad), (0, 0))), (a,), bw)


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """Fused affine map for 2-D inputs: x @ w + b."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out_data = x.data @ w.data + b.data

    def bw(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return _make(out_data, (x, w, b), bw)


# composites ---------------------------------------------------------------

def softmax_lastaxis(a):
    """Numerically stable softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _acc(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    return add(mul(div(centered, sqrt(add(var, eps))), gain), bias)
