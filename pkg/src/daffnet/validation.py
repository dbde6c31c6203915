"""Input checks for the array-level estimator interface."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def check_pairs(X, divisor: int = 16) -> np.ndarray:
    """Validate a stack of image pairs ``(n, 2, D, H, W)`` and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ContractViolation(f"expected pairs shaped (n, 2, D, H, W), got {X.shape}")
    if X.shape[0] < 1:
        raise ContractViolation("need at least one pair")
    if not np.issubdtype(X.dtype, np.number):
        raise ContractViolation(f"pairs must be numeric, got dtype {X.dtype}")
    if any(s % divisor for s in X.shape[2:]):
        raise ContractViolation(f"dims must be divisible by {divisor}, got {X.shape[2:]}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ContractViolation("pairs contain NaN or Inf")
    return X


def check_labels(y, X: np.ndarray, num_classes: int) -> np.ndarray:
    """Validate integer label pairs matching ``X`` in shape."""
    y = np.asarray(y)
    if y.shape != X.shape:
        raise ContractViolation(f"labels shape {y.shape} does not match pairs shape {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.rint(y)):
            raise ContractViolation("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ContractViolation(f"labels must lie in [0, {num_classes - 1}]")
    return y
