from __future__ import annotations

import numpy as np


def as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix contains non-finite values")
    return X


def pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, accumulated column by column.

    The Gram-matrix shortcut loses symmetry and gives tiny negative values for
    coincident points; callers rely on exact zeros and exact symmetry.
    """
    X = as_matrix(X)
    m, d = X.shape
    out = np.zeros((m, m))
    for j in range(d):
        diff = X[:, j][:, None] - X[:, j][None, :]
        out += diff * diff
    return out


def pairwise_dists(X: np.ndarray) -> np.ndarray:
    return np.sqrt(pairwise_sq_dists(X))
