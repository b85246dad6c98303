"""Input validation helpers shared by the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, InputError, ShapeError


def check_matrix(X, name="X", n_cols=None) -> np.ndarray:
    """Coerce to a finite float64 2-d array, optionally pinning the width."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise InputError(f"{name} is empty")
    if n_cols is not None and X.shape[1] != n_cols:
        raise ShapeError(f"{name} has {X.shape[1]} columns, expected {n_cols}")
    if not np.isfinite(X).all():
        raise DomainError(f"{name} contains non-finite values")
    return X


def check_unit_rows(X, name="X", atol=1e-6) -> np.ndarray:
    """Require rows to be L2-normalized within tolerance."""
    X = check_matrix(X, name)
    norms = np.linalg.norm(X, axis=1)
    bad = np.abs(norms - 1.0) > atol
    if bad.any():
        raise DomainError(
            f"{name} row {int(np.argmax(bad))} has norm {norms[bad][0]:.6g}, "
            "expected unit length"
        )
    return X


def check_binary_labels(y, n_samples, name="y") -> np.ndarray:
    """Coerce to a float 0/1 vector matching the sample count."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != n_samples:
        raise ShapeError(f"{name} has {y.shape[0]} entries for {n_samples} samples")
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError(f"{name} must contain only 0/1 labels")
    return y


def check_triplet_width(X, name="X") -> int:
    """Width of one element for an (n, 3*D) stacked triplet matrix."""
    X = check_matrix(X, name)
    if X.shape[1] % 3 != 0:
        raise ShapeError(
            f"{name} width {X.shape[1]} is not divisible by 3 "
            "(expected hstacked reference/modification/target rows)"
        )
    return X.shape[1] // 3
