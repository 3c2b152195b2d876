"""Input validation helpers used by the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_image_batch(x, dtype=np.float64):
    """Coerce to a finite (n, p, p) array with odd square side."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected images of shape (n, p, p), got {arr.shape}")
    n, p, q = arr.shape
    if p != q:
        raise ValueError(f"images must be square, got {p}x{q}")
    if p % 2 == 0:
        raise ValueError(f"image side must be odd, got {p}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image pixels must be finite")
    return arr


def check_square_image(img, p=None):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected a square image, got shape {arr.shape}")
    if p is not None and arr.shape[0] != p:
        raise ValueError(f"image side {arr.shape[0]} does not match expected {p}")
    return arr


def check_unit_quaternions(q, atol=1e-9):
    arr = np.asarray(q, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected quaternions of shape (n, 4), got {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError("quaternions must have unit norm")
    return arr[0] if single else arr


def check_group_labels(group_of, n):
    g = np.asarray(group_of, dtype=np.int32)
    if g.shape != (n,):
        raise ValueError(f"group labels must have shape ({n},), got {g.shape}")
    if np.any(g < 0):
        raise ValueError("group indices must be non-negative")
    return g
