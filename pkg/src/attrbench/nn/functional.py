"""Differentiable primitives for 3D CNNs.

Every function takes and returns :class:`Tensor` objects and records a
vector-Jacobian product on the active tape. Array-level helpers (suffix
``_array``) are exposed for code that needs the raw operators, such as
relevance propagation.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .tensor import Tensor, record

_SPATIAL = (2, 3, 4)


# --------------------------------------------------------------------------
# 3D convolution ("same" zero padding, stride 1, odd kernels) via FFT
# --------------------------------------------------------------------------


def _conv_geometry(spatial, ksize):
    for k in ksize:
        if k % 2 != 1:
            raise ValueError(f"kernel sizes must be odd, got {tuple(ksize)}")
    radius = tuple(k // 2 for k in ksize)
    # circular correlation does not wrap onto valid voxels once L >= D + r
    fft_len = tuple(sfft.next_fast_len(d + r, real=True) for d, r in zip(spatial, radius))
    return radius, fft_len


def _wrap_index(n, shift, length):
    return (np.arange(n) - shift) % length


def _take3(arr, idx):
    i, j, k = idx
    return arr[..., i[:, None, None], j[None, :, None], k[None, None, :]]


def _check_conv_shapes(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects x[N,C,D,H,W] and w[K,C,kd,kh,kw], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")


def conv3d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, return_cache: bool = False):
    """Cross-correlation of ``x`` with ``w`` under zero "same" padding."""
    _check_conv_shapes(x, w)
    spatial = x.shape[2:]
    radius, L = _conv_geometry(spatial, w.shape[2:])
    xf = sfft.rfftn(x, L, axes=_SPATIAL)
    wf = sfft.rfftn(w, L, axes=_SPATIAL)
    if x.shape[1] == 1:
        yf = xf * wf[:, 0].conj()[None]
    else:
        yf = np.einsum("nc...,kc...->nk...", xf, wf.conj())
    full = sfft.irfftn(yf, L, axes=_SPATIAL)
    y = _take3(full, [_wrap_index(d, r, l) for d, r, l in zip(spatial, radius, L)])
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1, 1)
    y = y.astype(x.dtype, copy=False)
    if return_cache:
        return y, (xf, wf, L, radius)
    return y


def conv3d_input_grad_array(g: np.ndarray, w: np.ndarray, wf=None, gf=None) -> np.ndarray:
    """Adjoint of :func:`conv3d_array` with respect to its input."""
    spatial = g.shape[2:]
    radius, L = _conv_geometry(spatial, w.shape[2:])
    if wf is None:
        wf = sfft.rfftn(w, L, axes=_SPATIAL)
    if gf is None:
        gf = sfft.rfftn(g, L, axes=_SPATIAL)
    if w.shape[0] == 1:
        dxf = gf[:, :1] * wf[0][None]
    else:
        dxf = np.einsum("nk...,kc...->nc...", gf, wf)
    full = sfft.irfftn(dxf, L, axes=_SPATIAL)
    r0, r1, r2 = radius
    d0, d1, d2 = spatial
    return full[:, :, r0 : r0 + d0, r1 : r1 + d1, r2 : r2 + d2].astype(g.dtype, copy=False)


def conv3d_weight_grad_array(g: np.ndarray, xf: np.ndarray, ksize, L, radius, gf=None) -> np.ndarray:
    if gf is None:
        gf = sfft.rfftn(g, L, axes=_SPATIAL)
    dwf = np.einsum("nk...,nc...->kc...", gf.conj(), xf)
    full = sfft.irfftn(dwf, L, axes=_SPATIAL)
    return _take3(full, [_wrap_index(k, r, l) for k, r, l in zip(ksize, radius, L)]).astype(g.dtype, copy=False)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    bias = None if b is None else b.data
    y, (xf, wf, L, radius) = conv3d_array(x.data, w.data, bias, return_cache=True)
    ksize = w.shape[2:]

    def vjp(g):
        gf = sfft.rfftn(g, L, axes=_SPATIAL)
        dx = dw = db = None
        if x.requires_grad:
            dx = conv3d_input_grad_array(g, w.data, wf=wf, gf=gf)
        if w.requires_grad:
            dw = conv3d_weight_grad_array(g, xf, ksize, L, radius, gf=gf)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3, 4))
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", inputs, y, vjp)


# --------------------------------------------------------------------------
# Normalisation, activations, pooling
# --------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation; updates running statistics in place when training."""
    if x.data.ndim != 5:
        raise ValueError(f"batch_norm expects [N,C,D,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm parameters must have shape ({C},)")
    shape = (1, C, 1, 1, 1)
    axes = (0, 2, 3, 4)
    if training:
        n = x.data.size // C
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
        y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(shape)
            dx = None
            if x.requires_grad:
                dx = (
                    inv_std.reshape(shape)
                    / n
                    * (
                        n * dxhat
                        - dxhat.sum(axis=axes).reshape(shape)
                        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
                    )
                )
            return dx, dgamma, dbeta

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv_std.reshape(shape)
        y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def vjp(g):
            dx = g * (gamma.data * inv_std).reshape(shape) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", (x, gamma, beta), y.astype(x.dtype, copy=False), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def vjp(g):
        return (g * mask,)

    return record("relu", (x,), y, vjp, mask=mask)


def _pool_windows(a: np.ndarray):
    N, C, D, H, W = a.shape
    D2, H2, W2 = D // 2, H // 2, W // 2
    if min(D2, H2, W2) < 1:
        raise ValueError(f"max pooling needs every spatial dim >= 2, got {a.shape[2:]}")
    win = a[:, :, : 2 * D2, : 2 * H2, : 2 * W2].reshape(N, C, D2, 2, H2, 2, W2, 2)
    return win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, D2, H2, W2, 8)


def _unpool(values: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    """Scatter pooled ``values`` back to the winning positions of each window."""
    N, C, D2, H2, W2 = values.shape
    win = np.zeros((N, C, D2, H2, W2, 8), dtype=values.dtype)
    np.put_along_axis(win, argmax[..., None], values[..., None], axis=-1)
    win = win.reshape(N, C, D2, H2, W2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    out = np.zeros(in_shape, dtype=values.dtype)
    out[:, :, : 2 * D2, : 2 * H2, : 2 * W2] = win.reshape(N, C, 2 * D2, 2 * H2, 2 * W2)
    return out


def max_pool3d_array(a: np.ndarray):
    """2x2x2 max pooling with stride 2; returns the pooled array and window argmax."""
    win = _pool_windows(a)
    argmax = win.argmax(axis=-1)
    return np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0], argmax


def max_pool3d_unpool_array(values: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    return _unpool(values, argmax, in_shape)


def max_pool3d(x: Tensor) -> Tensor:
    y, argmax = max_pool3d_array(x.data)
    in_shape = x.shape

    def vjp(g):
        return (_unpool(g, argmax, in_shape),)

    return record("max_pool3d", (x,), y, vjp, argmax=argmax)


def flatten(x: Tensor) -> Tensor:
    in_shape = x.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return record("flatten", (x,), x.data.reshape(in_shape[0], -1), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape [out, in]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def vjp(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data
        db = g.sum(axis=0) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", inputs, y, vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def vjp(g):
        return (g * keep,)

    return record("dropout", (x,), x.data * keep, vjp)


# --------------------------------------------------------------------------
# Losses and reductions
# --------------------------------------------------------------------------


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_array(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_array(logits))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    N = logits.shape[0]
    logp = log_softmax_array(logits.data)
    loss = -logp[np.arange(N), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(N), labels] -= 1.0
        return (d * (g / N),)

    return record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), vjp)


def pick(logits: Tensor, cls: int) -> Tensor:
    """Column ``cls`` of a [N, K] tensor."""

    def vjp(g):
        d = np.zeros_like(logits.data)
        d[:, cls] = g
        return (d,)

    return record("pick", (logits,), logits.data[:, cls].copy(), vjp)


def tsum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), vjp)


def mul(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array."""
    c = np.asarray(c, dtype=x.dtype)

    def vjp(g):
        return (g * c,)

    return record("mul", (x,), x.data * c, vjp)
