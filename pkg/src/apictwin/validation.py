"""Input checks shared by the estimators and procedures."""

from __future__ import annotations

import numpy as np


def as_feature(X, name: str = "X") -> np.ndarray:
    """Return a finite 1-D float array from a 1-D array or an ``(n, 1)`` column."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D or a single column, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_xy(X, y, min_points: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = as_feature(X)
    y = as_feature(y, "y")
    if x.size != y.size:
        raise ValueError(f"X and y lengths differ ({x.size} vs {y.size})")
    if x.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {x.size}")
    return x, y


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not (value > 0 and np.isfinite(value)):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_fraction(value: float, name: str, *, open_low: bool = False) -> float:
    value = float(value)
    ok = (0.0 < value <= 1.0) if open_low else (0.0 <= value <= 1.0)
    if not ok:
        bounds = "(0, 1]" if open_low else "[0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {value!r}")
    return value
