"""Layer primitives on top of the autodiff core.

3D convolution is implemented as cross-correlation via a strided window view
plus one einsum; the transposed convolution is its exact adjoint (they share
the raw gradient kernels), which makes the inner-product identity
<conv(x), y> == <x, conv_t(y)> hold to rounding error.
"""

from __future__ import annotations

from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .autodiff import ShapeError, Tensor, _node, as_tensor


class Parameter:
    """Named trainable tensor with Adam moment slots."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


# ----------------------------------------------------------------------
# raw conv kernels (plain numpy, shared by forward and adjoint)
# ----------------------------------------------------------------------

def _conv3d_raw(x, w, stride, padding):
    n, c, d, h, wd = x.shape
    k, cw, kd, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, weight expects {cw}")
    for name, dim, kdim in (("depth", d, kd), ("height", h, kh), ("width", wd, kw)):
        if dim + 2 * padding < kdim:
            raise ShapeError(f"conv3d {name}: size {dim} + 2*{padding} padding < kernel {kdim}")
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    return np.einsum("ncdhwijk,ocijk->nodhw", win, w, optimize=True)


def _conv3d_weight_grad(x, gy, stride, padding, w_shape):
    kd, kh, kw = w_shape[2:]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    do, ho, wo = gy.shape[2:]
    win = win[:, :, :do, :ho, :wo]
    return np.einsum("ncdhwijk,nodhw->ocijk", win, gy, optimize=True)


def _conv3d_input_grad_loop(gy, w, stride, padding, in_shape):
    # scatter-add fallback, one small einsum per kernel offset
    n, c, d, h, wd = in_shape
    k, cw, kd, kh, kw = w.shape
    p = padding
    gxp = np.zeros((n, c, d + 2 * p, h + 2 * p, wd + 2 * p), dtype=gy.dtype)
    do, ho, wo = gy.shape[2:]
    s = stride
    for i, j, l in product(range(kd), range(kh), range(kw)):
        t = np.einsum("nodhw,oc->ncdhw", gy, w[:, :, i, j, l], optimize=True)
        gxp[:, :, i : i + s * do : s, j : j + s * ho : s, l : l + s * wo : s] += t
    if p:
        return gxp[:, :, p : p + d, p : p + h, p : p + wd]
    return gxp


def _conv3d_input_grad(gy, w, stride, padding, in_shape):
    # input gradient as one dense convolution: dilate gy by the stride,
    # pad by (kernel - 1 - padding), and convolve with the channel-swapped,
    # spatially reversed kernel
    n, c, d, h, wd = in_shape
    k, cw, kd, kh, kw = w.shape
    s, p = stride, padding
    do, ho, wo = gy.shape[2:]
    pads = []
    for dim, kk, n_out in zip((d, h, wd), (kd, kh, kw), (do, ho, wo)):
        dil = (n_out - 1) * s + 1
        left = kk - 1 - p
        right = dim + p - dil
        if left < 0 or right < 0:
            return _conv3d_input_grad_loop(gy, w, stride, padding, in_shape)
        pads.append((left, right))
    if s > 1:
        gd = np.zeros(
            (n, k, (do - 1) * s + 1, (ho - 1) * s + 1, (wo - 1) * s + 1), dtype=gy.dtype
        )
        gd[:, :, ::s, ::s, ::s] = gy
    else:
        gd = gy
    gp = np.pad(gd, ((0, 0), (0, 0)) + tuple(pads))
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return _conv3d_raw(gp, w_flip, 1, 0)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Strided 3D cross-correlation. x: [N,C,D,H,W], weight: [K,C,kd,kh,kw]."""
    if stride < 1:
        raise ShapeError(f"conv3d stride must be >= 1, got {stride}")
    x, weight = as_tensor(x), as_tensor(weight)
    out = _conv3d_raw(x.data, weight.data, stride, padding)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = _conv3d_input_grad(g, weight.data, stride, padding, x.shape)
        gw = _conv3d_weight_grad(x.data, g, stride, padding, weight.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw)


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of conv3d. x: [N,K,D,H,W], weight: [K,C,kd,kh,kw] -> [N,C,D',H',W']
    with D' = (D-1)*stride - 2*padding + kd."""
    if stride < 1:
        raise ShapeError(f"conv_transpose3d stride must be >= 1, got {stride}")
    x, weight = as_tensor(x), as_tensor(weight)
    k, c, kd, kh, kw = weight.shape
    if x.shape[1] != k:
        raise ShapeError(f"conv_transpose3d channel mismatch: input has {x.shape[1]}, weight expects {k}")
    n = x.shape[0]
    out_spatial = tuple(
        (s - 1) * stride - 2 * padding + kk for s, kk in zip(x.shape[2:], (kd, kh, kw))
    )
    if any(s < 1 for s in out_spatial):
        raise ShapeError(f"conv_transpose3d output spatial size {out_spatial} not positive")
    out_shape = (n, c) + out_spatial
    out = _conv3d_input_grad(x.data, weight.data, stride, padding, out_shape)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = _conv3d_raw(g, weight.data, stride, padding)
        gw = _conv3d_weight_grad(g, x.data, stride, padding, weight.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw)


# ----------------------------------------------------------------------
# normalization / dense / dropout
# ----------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/var buffers for batch norm (not trained)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm3d(x, gamma, beta, running: RunningStats, mode: str, eps=1e-5, momentum=0.1):
    """Per-channel normalization over (N, D, H, W) then affine transform.

    Train mode uses batch statistics and updates `running` in place; eval
    mode normalizes with the running statistics.
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    axes = (0, 2, 3, 4)
    c = x.shape[1]
    if mode == "train":
        count = x.size // c
        if count < 2:
            raise ShapeError("batch_norm3d train mode needs >= 2 elements per channel")
        mean = x.mean(axis=axes, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
        unbiased = var.data.reshape(c) * count / (count - 1)
        running.mean = ((1 - momentum) * running.mean + momentum * mean.data.reshape(c)).astype(
            running.mean.dtype
        )
        running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(
            running.var.dtype
        )
    else:
        mean = Tensor(running.mean.reshape(1, c, 1, 1, 1))
        var = Tensor(running.var.reshape(1, c, 1, 1, 1))
    from .autodiff import sqrt

    xn = (x - mean) / sqrt(var + eps)
    shape = (1, c, 1, 1, 1)
    return xn * gamma.reshape(shape) + beta.reshape(shape)


def linear(x, weight, bias=None):
    """Affine map: x [N,F] @ weight [G,F].T + bias [G]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, weight {weight.shape}")
    from .autodiff import matmul, transpose

    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = out + as_tensor(bias)
    return out


def dropout(x, rate: float, mode: str, seed: int):
    """Inverted dropout; eval mode and rate 0 are exact identities."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    g = rng.generator(seed)
    keep = (g.random(x.shape) >= rate).astype(x.dtype)
    mask = keep / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * Tensor(mask)


# ----------------------------------------------------------------------
# initializers
# ----------------------------------------------------------------------

def kaiming_conv(gen: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (gen.standard_normal(shape) * std).astype(dtype)


def kaiming_linear(gen: np.random.Generator, out_features: int, in_features: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / in_features)
    return (gen.standard_normal((out_features, in_features)) * std).astype(dtype)
