"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np

from .errors import ArgumentError


def check_points(X, name="X", min_points=1, copy=False):
    """Return ``X`` as a finite float64 array of shape (n, 3)."""
    try:
        X = np.array(X, dtype=np.float64, copy=copy) if copy else np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ArgumentError(f"{name}: cannot convert to a float array ({exc})") from None
    if X.ndim != 2 or X.shape[1] != 3:
        raise ArgumentError(f"{name}: expected shape (n, 3), got {X.shape}")
    if X.shape[0] < min_points:
        raise ArgumentError(f"{name}: need at least {min_points} points, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ArgumentError(f"{name}: contains non-finite values")
    return X


def check_indices(idx, n, name="indices", allow_empty=False, unique=False):
    idx = np.asarray(idx)
    if idx.size == 0:
        if not allow_empty:
            raise ArgumentError(f"{name}: empty")
        return idx.astype(np.int64).reshape(0)
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(np.equal(np.mod(idx, 1), 0)):
            raise ArgumentError(f"{name}: indices must be integers")
    idx = idx.astype(np.int64).ravel()
    if idx.min() < 0 or idx.max() >= n:
        raise ArgumentError(f"{name}: index out of range [0, {n})")
    if unique and np.unique(idx).size != idx.size:
        raise ArgumentError(f"{name}: duplicate indices")
    return idx


def check_positive(value, name, allow_zero=False):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ArgumentError(f"{name}: expected a real number, got {value!r}") from None
    ok = value >= 0 if allow_zero else value > 0
    if not (np.isfinite(value) and ok):
        bound = ">= 0" if allow_zero else "> 0"
        raise ArgumentError(f"{name}: must be finite and {bound}, got {value}")
    return value


def check_fraction(value, name, closed_low=True, closed_high=False):
    value = float(value)
    lo_ok = value >= 0 if closed_low else value > 0
    hi_ok = value <= 1 if closed_high else value < 1
    if not (lo_ok and hi_ok):
        raise ArgumentError(f"{name}: out of range, got {value}")
    return value


def bbox_diagonal(X):
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return 0.0
    return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))
