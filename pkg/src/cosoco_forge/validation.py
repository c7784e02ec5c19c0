"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_patch_batch(X, patch: int) -> np.ndarray:
    """Validate a stack of uint8 ``(n, patch, patch, 3)`` patches."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1:] != (patch, patch, 3):
        raise ValueError(f"expected patches of shape (n, {patch}, {patch}, 3), got {X.shape}")
    if X.dtype != np.uint8:
        if X.size and (X.min() < 0 or X.max() > 255):
            raise ValueError("patch values must lie in [0, 255]")
        X = X.astype(np.uint8)
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)


def check_power_of_two(name: str, value: int) -> int:
    value = int(value)
    if value < 1 or value & (value - 1):
        raise ValueError(f"{name} must be a power of two, got {value}")
    return value
