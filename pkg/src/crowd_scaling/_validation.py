"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def as_1d(X, name="X") -> np.ndarray:
    """Accept a 1-D array or an (n, 1) column and return a finite float vector."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"{name} must have a single feature, got shape {arr.shape}")
        arr = arr[:, 0]
    arr = check_array(arr, ensure_2d=False, dtype=float, input_name=name)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return arr


def check_xy(X, y, min_samples=1) -> tuple[np.ndarray, np.ndarray]:
    x = as_1d(X, "X")
    y = check_array(y, ensure_2d=False, dtype=float, input_name="y")
    check_consistent_length(x, y)
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} points, got {x.size}")
    return x, y


def split_points(points) -> tuple[np.ndarray, np.ndarray]:
    """Split a sequence of (x, y) pairs, or an (n, 2) array, into two vectors."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"points must be (n, 2), got shape {arr.shape}")
    return arr[:, 0].copy(), arr[:, 1].copy()


def check_positive(arr: np.ndarray, name: str) -> None:
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive")


def check_fraction(value: float, name: str, *, allow_one=True) -> None:
    upper_ok = value <= 1 if allow_one else value < 1
    if not (value > 0 and upper_ok):
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
