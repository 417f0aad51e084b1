"""Differentiable primitives on ``(N, C, H, W)`` tensors.

Convolution is im2col + a single matmul; the backward pass scatters columns
back with one strided add per kernel tap, so numerics match a direct loop up
to summation order.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from steerer.tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------- conv


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Padded (N, C, Hp, Wp) -> (N, Ho, Wo, C*k*k) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``w`` has shape ``(C_out, C_in, k, k)``; ``b`` has shape ``(C_out,)``.
    """
    _check_rank4(x, "conv2d input")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be (C_out, C_in, k, k) and square, got {w.shape}")
    c_out, c_in, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has C={c}, kernel expects C_in={c_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {h}x{wd} too small for k={k}, pad={pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride)
    wmat = w.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gt.T @ cols.reshape(-1, c_in * k * k)).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(n, ho, wo, c_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, _backward, "conv2d")


# --------------------------------------------------------------------------- norm


class RunningStats:
    """Per-channel running mean/variance for batch norm in eval mode."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        self.mean *= 1.0 - BN_MOMENTUM
        self.mean += BN_MOMENTUM * mean
        self.var *= 1.0 - BN_MOMENTUM
        self.var += BN_MOMENTUM * var_unbiased


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None = None,
               training: bool = True) -> Tensor:
    _check_rank4(x, "batch_norm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm expects gamma/beta of shape ({c},), got {gamma.shape}, {beta.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        if running is not None:
            unbiased = var.ravel() * (m / (m - 1)) if m > 1 else var.ravel()
            running.update(mean.ravel(), unbiased)
    else:
        if running is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        m = None
        centered = x.data - running.mean.reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(running.var + BN_EPS)).reshape(1, c, 1, 1)
    xhat = centered * inv
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if m is None:
                gx = dxhat * inv
            else:
                gx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), _backward, "batch_norm")


# --------------------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum (not where) so a NaN input stays NaN and the trainer can catch it
    return make_result(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, s: float) -> Tensor:
    return make_result(x.data * s, (x,), lambda g: (g * s,), "scale")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a rank-0 tensor."""
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may have one channel and broadcast over ``a``'s."""
    if a.shape != b.shape:
        ok = (a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1
              and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3]))
        if not ok:
            raise ShapeError(f"hadamard cannot broadcast {b.shape} over {a.shape}")
    broadcast = a.shape != b.shape

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if broadcast:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return make_result(a.data * b.data, (a, b), _backward, "hadamard")


def channel_softmax(x: Tensor) -> Tensor:
    _check_rank4(x, "channel_softmax input")
    if x.shape[1] < 2:
        raise ShapeError(f"channel_softmax needs at least 2 channels, got {x.shape[1]}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, (x,), _backward, "channel_softmax")


# --------------------------------------------------------------------------- layout


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels needs matching N, H, W, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b),
                       lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank4(x, "channel_slice input")
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), (x,), _backward, "channel_slice")


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) half-pixel bilinear weights, edge-clamped."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling with the align-corners=False convention."""
    _check_rank4(x, "upsample_bilinear input")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    uh = _interp_matrix(x.shape[2], factor).astype(x.dtype, copy=False)
    uw = _interp_matrix(x.shape[3], factor).astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def _backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return make_result(out, (x,), _backward, "upsample_bilinear")


# --------------------------------------------------------------------------- loss


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Half the masked sum of squared residuals: sum((mask * (pred - target))**2) / 2.

    ``target`` and ``mask`` are constants (arrays or tensors; no gradient flows
    into them) and must match ``pred``'s shape.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    mk = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=pred.dtype)
    if t.shape != pred.shape or mk.shape != pred.shape:
        raise ShapeError(f"masked_mse shapes differ: pred {pred.shape}, target {t.shape}, mask {mk.shape}")
    r = mk * (pred.data - t)
    return make_result(np.asarray(0.5 * np.sum(r * r)), (pred,), lambda g: (g * mk * r,), "masked_mse")
