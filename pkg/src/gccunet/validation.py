"""Input checks shared by the estimator wrapper and the command line."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def check_images(X, in_channels: int | None = None) -> np.ndarray:
    """Coerce to float64 [N,C,H,W] with finite values in [0, 1]; [N,H,W] gains a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"images must be [N,H,W] or [N,C,H,W], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image intensities must be scaled to [0, 1]")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ShapeError(f"expected {in_channels} image channels, got {X.shape[1]}")
    return X


def check_masks(y, shape: tuple, name: str = "labels") -> np.ndarray:
    """Binary uint8 masks of the given [N,H,W] shape."""
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ShapeError(f"{name} must have shape {tuple(shape)}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return y.astype(np.uint8)


def check_divisible(shape: tuple, depth: int) -> None:
    f = 2 ** depth
    H, W = shape[-2:]
    if H % f or W % f:
        raise ShapeError(f"extents {H}x{W} must be divisible by {f}; pad by {(-H) % f} rows and {(-W) % f} columns")
