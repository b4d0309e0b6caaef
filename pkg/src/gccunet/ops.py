"""Differentiable array operators used by the network layers."""
from __future__ import annotations

import contextlib

import numpy as np

from .tensor import (
    DTYPE,
    ConfigurationError,
    ShapeError,
    Tensor,
    as_tensor,
    register_op,
)

register_op("conv2d", "2-D cross-correlation, NCHW")
register_op("max_pool2d", "non-overlapping max pooling")
register_op("global_avg_pool", "mean over H, W")
register_op("softmax", "max-shifted softmax along an axis")
register_op("upsample_nearest", "nearest-neighbour integer upsampling")
register_op("unfold_windows", "gather k x k neighbourhoods into a new axis")
register_op("squash", "capsule length squashing along the last axis")

_flop_counter: list[int] | None = None


@contextlib.contextmanager
def count_flops():
    """Collect multiply-accumulate counts of conv2d/matmul-heavy ops.

    Yields a one-element list whose entry is updated in place.
    """
    global _flop_counter
    prev = _flop_counter
    _flop_counter = [0]
    try:
        yield _flop_counter
    finally:
        _flop_counter = prev


def _add_flops(n: int) -> None:
    if _flop_counter is not None:
        _flop_counter[0] += int(n)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output extent ({size} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [B,C,H,W] with ``weight`` [O,C,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if kh != kw or kh < 1:
        raise ConfigurationError(f"conv2d needs a square kernel with k >= 1, got {kh}x{kw}")
    k = kh
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1 and stride == 1:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        cols = np.empty((B, Ho, Wo, C, k, k), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                patch = xd[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                cols[..., i, j] = patch.transpose(0, 2, 3, 1)
        cols = cols.reshape(-1, C * k * k)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    _add_flops(out.size * wmat.shape[1])
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    Hp, Wp = xd.shape[2], xd.shape[3]

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if k == 1 and stride == 1:
                gxp = gcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(B, Ho, Wo, C, k, k)
                gxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                            gcols[..., i, j].transpose(0, 3, 1, 2)
                        )
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; ties route to the first maximum."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"max_pool2d needs H, W divisible by {size}, got {H}x{W}")
    Ho, Wo = H // size, W // size
    win = x.data.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, Ho, Wo, size * size), dtype=DTYPE)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1] plane means."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / (H * W), (B, C, H, W)).copy(),)

    return Tensor._from_op(out, (x,), bw, "global_avg_pool")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel of [B,C,H,W] into a ``factor`` x ``factor`` block."""
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Tensor._from_op(x.data, (x,), lambda g: (g,), "upsample_nearest")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), bw, "upsample_nearest")


def unfold_windows(x: Tensor, k: int, axes: tuple[int, int] = (1, 2)) -> Tensor:
    """Gather zero-padded k x k neighbourhoods over two spatial axes.

    The neighbourhood index (row-major over the window) is inserted as a new
    axis right after the second spatial axis.
    """
    x = as_tensor(x)
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"window size must be odd and >= 1, got {k}")
    ah, aw = axes
    if aw != ah + 1:
        raise ShapeError("spatial axes must be adjacent")
    r = k // 2
    H, W = x.shape[ah], x.shape[aw]
    pad = [(0, 0)] * x.ndim
    pad[ah] = (r, r)
    pad[aw] = (r, r)
    xp = np.pad(x.data, pad) if r else x.data
    out_shape = x.shape[:aw + 1] + (k * k,) + x.shape[aw + 1:]
    out = np.empty(out_shape, dtype=DTYPE)
    lead = (slice(None),) * ah
    for i in range(k):
        for j in range(k):
            out[lead + (slice(None), slice(None), i * k + j)] = xp[lead + (slice(i, i + H), slice(j, j + W))]

    def bw(g):
        gp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gp[lead + (slice(i, i + H), slice(j, j + W))] += g[lead + (slice(None), slice(None), i * k + j)]
        if r:
            gp = gp[lead + (slice(r, r + H), slice(r, r + W))]
        return (np.ascontiguousarray(gp),)

    return Tensor._from_op(out, (x,), bw, "unfold_windows")


def squash_array(sd: np.ndarray, axis: int = -1) -> np.ndarray:
    sq = (sd * sd).sum(axis=axis, keepdims=True)
    return (np.sqrt(sq) / (1.0 + sq)) * sd


def squash_grad(sd: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of ``squash_array`` at ``sd``."""
    sq = (sd * sd).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    scale = n / (1.0 + sq)
    # (d scale / d n) / n, which stays finite as |s| -> 0 because it multiplies s (s . g)
    safe_n = np.where(n > 1e-150, n, 1.0)
    coef = np.where(n > 1e-150, (1.0 - sq) / (safe_n * (1.0 + sq) ** 2), 0.0)
    sg = (sd * g).sum(axis=axis, keepdims=True)
    return scale * g + coef * sd * sg


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = (|s|^2 / (1 + |s|^2)) * s / |s|, with v = 0 at s = 0."""
    s = as_tensor(s)
    sd = s.data
    return Tensor._from_op(squash_array(sd, axis), (s,), lambda g: (squash_grad(sd, g, axis),), "squash")
