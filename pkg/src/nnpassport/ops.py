"""Differentiable operations over :class:`~nnpassport.tensor.Tensor`.

Convolution follows the deep-learning convention (cross-correlation). All
reductions are plain numpy reductions in the storage dtype.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ShapeError
from .tensor import Tensor, as_tensor


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,Cin,H,W] with ``kernel`` [Cout,Cin,kh,kw]."""
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: [N, Cin, Ho, Wo, kh, kw]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _backward(g: np.ndarray):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # [N, Ho, Wo, Cin, kh, kw]
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return Tensor._wrap(out, (x, kernel), _backward, "conv2d")


def dense_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[n, j] = sum_i weight[j, i] * x[n, i] + bias[j]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError("dense_affine expects input [N,Din], weight [Dout,Din], bias [Dout]")
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(f"incompatible shapes {x.shape}, {weight.shape}, {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def _backward(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return Tensor._wrap(out, (x, weight, bias), _backward, "dense_affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def _backward(g):
        return (g * mask,)

    return Tensor._wrap(out, (x,), _backward, "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool needs a non-empty spatial extent")
    out = x.data.mean(axis=(2, 3))
    scale = x.data.dtype.type(1.0 / (h * w))

    def _backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return Tensor._wrap(out, (x,), _backward, "global_avg_pool")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects logits [N,K], got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {n}")
    if n and (y.min() < 0 or y.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    out = np.asarray(loss, dtype=logits.data.dtype)

    def _backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1
        return (p * (g / n),)

    return Tensor._wrap(out, (logits,), _backward, "cross_entropy")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._wrap(out, (a, b), _backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._wrap(out, (a, b), _backward, "mul")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return Tensor._wrap(out, (x,), _backward, "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def _backward(g):
        return (g.reshape(x.shape),)

    return Tensor._wrap(out, (x,), _backward, "reshape")


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel ``gamma * x + beta`` on [N,C,H,W] (or [N,C]) input."""
    c = x.shape[1] if x.ndim >= 2 else -1
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"scale/shift of shape {gamma.shape}/{beta.shape} for {c} channels")
    expand = (slice(None),) + (None,) * (x.ndim - 2)
    g_ = gamma.data[expand]
    b_ = beta.data[expand]
    out = x.data * g_ + b_
    axes = (0,) + tuple(range(2, x.ndim))

    def _backward(g):
        return (g * g_ if x.requires_grad else None,
                (g * x.data).sum(axis=axes) if gamma.requires_grad else None,
                g.sum(axis=axes) if beta.requires_grad else None)

    return Tensor._wrap(out, (x, gamma, beta), _backward, "channel_affine")


def batch_standardize(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Standardize each channel with its batch mean and (biased) variance.

    Returns the standardized tensor plus the batch mean and variance so the
    caller can update running statistics. A constant channel maps to zero.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    m = x.data.size // x.shape[1]
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv

    def _backward(g):
        s1 = g.sum(axis=axes, keepdims=True)
        s2 = (g * xhat).sum(axis=axes, keepdims=True)
        return ((inv / m) * (m * g - s1 - xhat * s2),)

    out = Tensor._wrap(xhat, (x,), _backward, "batch_standardize")
    return out, mean.reshape(-1), var.reshape(-1)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))
