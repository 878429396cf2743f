from __future__ import annotations

import logging

import numpy as np

from .distance import as_matrix, pairwise_dists
from .result import ClusterResult, relabel

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6
DEFAULT_QUANTILE = 0.3
DEFAULT_MAX_ITER = 300


def estimate_bandwidth(X, quantile: float = DEFAULT_QUANTILE) -> float:
    """``quantile`` of all pairwise Euclidean distances (linear interpolation)."""
    X = as_matrix(X)
    m = X.shape[0]
    if m < 2:
        raise ValueError("bandwidth estimation needs at least two points")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    d = pairwise_dists(X)[np.triu_indices(m, 1)]
    return max(float(np.quantile(d, quantile)), BANDWIDTH_FLOOR)


def _sq_dists_to(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    out = np.zeros((P.shape[0], X.shape[0]))
    for j in range(X.shape[1]):
        diff = P[:, j][:, None] - X[:, j][None, :]
        out += diff * diff
    return out


def shift_vector(points: np.ndarray, X: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel mean-shift vector m(x) evaluated at each row of ``points``."""
    d2 = _sq_dists_to(points, X)
    # Shifting by the row minimum keeps the largest weight at exp(0) = 1.
    d2 -= d2.min(axis=1, keepdims=True)
    w = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
    return (w @ X) / w.sum(axis=1)[:, None] - points


def kernel_density(points: np.ndarray, X: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = _sq_dists_to(points, X)
    return np.exp(-d2 / (2.0 * bandwidth * bandwidth)).sum(axis=1)


def mean_shift(
    X,
    bandwidth: float,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float | None = None,
) -> ClusterResult:
    """Move every point uphill on the kernel density until ``||m(x)|| < tol``,
    then group converged points lying within ``bandwidth / 2`` of a mode.

    ``tol`` defaults to ``1e-3 * bandwidth``.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    X = as_matrix(X)
    m = X.shape[0]
    tol = 1e-3 * bandwidth if tol is None else float(tol)

    pos = X.copy()
    active = np.ones(m, dtype=bool)
    steps = np.zeros(m, dtype=int)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        mv = shift_vector(pos[idx], X, bandwidth)
        still = np.sqrt((mv * mv).sum(axis=1)) >= tol
        active[idx[~still]] = False
        moving = idx[still]
        pos[moving] += mv[still]
        steps[moving] += 1
    unconverged = int(active.sum())
    if unconverged:
        log.info("mean shift: %d of %d points did not converge in %d iterations", unconverged, m, max_iter)

    density = kernel_density(pos, X, bandwidth)
    order = np.lexsort((np.arange(m), -density))
    radius = bandwidth / 2.0
    modes: list[np.ndarray] = []
    mode_of = np.empty(m, dtype=np.intp)
    for i in order:
        if modes:
            dist = np.sqrt(((np.asarray(modes) - pos[i]) ** 2).sum(axis=1))
            j = int(np.argmin(dist))
            if dist[j] < radius:
                mode_of[i] = j
                continue
        modes.append(pos[i].copy())
        mode_of[i] = len(modes) - 1

    mode_arr = np.asarray(modes)
    assign = np.empty(m, dtype=np.intp)
    exemplars = []
    for j in range(len(modes)):
        members = np.flatnonzero(mode_of == j)
        d = ((X[members] - mode_arr[j]) ** 2).sum(axis=1)
        ex = int(members[np.argmin(d)])
        exemplars.append(ex)
        assign[members] = ex
    labels, ex = relabel(assign, exemplars)
    # Reorder modes to follow cluster numbering.
    mode_for_label = np.empty_like(mode_arr)
    for j, e in enumerate(exemplars):
        mode_for_label[labels[e]] = mode_arr[j]
    diag = {
        "bandwidth": bandwidth,
        "tol": tol,
        "iterations": int(steps.max(initial=0)),
        "unconverged": unconverged,
        "modes": mode_for_label,
    }
    return ClusterResult(labels, ex, "MeanShift", diag)
