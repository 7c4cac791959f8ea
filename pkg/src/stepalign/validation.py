"""Small input-validation helpers used by every public operation."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError


def require(cond: bool, message: str, exc=UsageError) -> None:
    if not cond:
        raise exc(message)


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ConfigurationError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, cols: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally with fixed column count."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ConfigurationError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} contains non-finite entries")
    return arr


def as_labels(y, n_classes: int, name: str = "y") -> np.ndarray:
    """Coerce class ids to a 1-D int array within [0, n_classes)."""
    arr = np.asarray(y)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        fl = np.asarray(arr, dtype=np.float64)
        if not np.all(fl == np.round(fl)):
            raise ConfigurationError(f"{name} must contain integer class ids")
        arr = fl.astype(np.int64)
    else:
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ConfigurationError(
            f"{name} must lie in [0, {n_classes}), got range [{arr.min()}, {arr.max()}]"
        )
    return arr


def check_timestep(t: int, lo: int, hi: int, name: str = "t") -> int:
    t = int(t)
    if not lo <= t <= hi:
        raise UsageError(f"{name}={t} outside [{lo}, {hi}]")
    return t
