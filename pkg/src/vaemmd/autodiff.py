"""Minimal reverse-mode autodiff on numpy arrays.

Tensors wrap an ndarray plus an optional backward closure. Building a graph
is implicit: every op that sees a requires_grad input records its parents and
a function mapping the output gradient to parent gradients. `backward` walks
the graph once in reverse topological order.

Gradients are written to every reachable requires_grad tensor. Calling
`backward` while any reachable tensor still holds a gradient raises
GraphError: silent accumulation across steps is a classic double-counting
bug, so a reset (zero_grad) is mandatory between passes.
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Misuse of the gradient graph (non-scalar loss, stale grads, ...)."""


class ShapeError(Exception):
    """Operand shapes incompatible with the requested operation."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference / caching)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward_fn = _backward_fn

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; record the graph edge only when grads can flow."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


# ----------------------------------------------------------------------
# elementwise ops (with numpy broadcasting; grads are unbroadcast back)
# ----------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def power(a, exponent: float):
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(out, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _node(out, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), bw)


def absolute(a):
    a = as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _node(out, (a,), bw)


def clamp(a, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        inside = ((a.data >= lo) & (a.data <= hi)).astype(g.dtype)
        return (g * inside,)

    return _node(out, (a,), bw)


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _node(out, (a,), bw)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def bw(g):
        return (g * np.where(a.data > 0, 1.0, slope).astype(g.dtype),)

    return _node(out, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bw)


def activation(a, kind: str, axis=-1):
    """Dispatch by name: relu | tanh | sigmoid | softmax."""
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softmax":
        return softmax(a, axis=axis)
    raise ValueError(f"unknown activation kind: {kind!r}")


# ----------------------------------------------------------------------
# reductions / structure
# ----------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.shape)]
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}: {e}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bw)


def flatten(a, start_axis=1):
    a = as_tensor(a)
    lead = a.shape[:start_axis]
    return reshape(a, lead + (-1,))


def transpose(a, axes):
    a = as_tensor(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _node(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(f"concat shapes incompatible on non-concat axes: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            g.take(range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), bw)


def pad(a, pad_width):
    """Zero-pad; pad_width as in np.pad (per-axis (before, after))."""
    a = as_tensor(a)
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

    def bw(g):
        return (g[sl],)

    return _node(out, (a,), bw)


def take(a, idx):
    """Basic slicing / integer indexing with gradient scatter-back."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(out, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims must match exactly: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _node(out, (a, b), bw)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------

def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad tensor.

    Raises GraphError for a non-scalar loss, a loss detached from the graph,
    or when any reachable tensor already carries a gradient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    order = _toposort(loss)
    for t in order:
        if t.requires_grad and t.grad is not None:
            raise GraphError(
                "gradients already populated on the graph; call zero_grad before backward"
            )

    pending = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g
        if t._backward_fn is None:
            continue
        parent_grads = t._backward_fn(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
