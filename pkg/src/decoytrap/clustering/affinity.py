"""Affinity propagation over a dense similarity matrix."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .distance import as_matrix, pairwise_sq_dists
from .result import ClusterResult, relabel

log = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.9
DEFAULT_MAX_ITER = 1000
# A 15-iteration window stops while damped messages are still drifting and
# misses the best exemplar set on roughly half of small problems.
DEFAULT_CONVERGENCE_ITER = 100


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    preference: float

    @property
    def size(self) -> int:
        return self.values.shape[0]


def similarity_matrix(X, preference: float | str = "median") -> SimilarityMatrix:
    """Negative squared Euclidean similarities with ``preference`` on the diagonal.

    ``"median"`` resolves to the median of the off-diagonal similarities
    (0 when there is a single point).
    """
    X = as_matrix(X)
    m = X.shape[0]
    if m < 1:
        raise ValueError("need at least one point")
    s = -pairwise_sq_dists(X)
    if isinstance(preference, str):
        if preference != "median":
            raise ValueError(f"unknown preference rule {preference!r}")
        off = s[~np.eye(m, dtype=bool)]
        pref = float(np.median(off)) if off.size else 0.0
    else:
        pref = float(preference)
    np.fill_diagonal(s, pref)
    return SimilarityMatrix(values=s, preference=pref)


def net_similarity(S: SimilarityMatrix | np.ndarray, exemplars) -> float:
    """Sum of s(i, c_i) where exemplars serve themselves at the preference."""
    s = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S)
    ex = np.asarray(sorted(set(int(e) for e in exemplars)), dtype=np.intp)
    best = s[:, ex].max(axis=1)
    best[ex] = s[ex, ex]
    return float(best.sum())


def affinity_propagation(
    S: SimilarityMatrix,
    damping: float = DEFAULT_DAMPING,
    max_iter: int = DEFAULT_MAX_ITER,
    convergence_iter: int = DEFAULT_CONVERGENCE_ITER,
) -> ClusterResult:
    """Exchange damped responsibility/availability messages until the
    exemplar set is stable for ``convergence_iter`` consecutive iterations.
    """
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    if max_iter < 1 or convergence_iter < 1:
        raise ValueError("iteration bounds must be positive")
    s_orig = np.asarray(S.values, dtype=np.float64)
    m = s_orig.shape[0]
    diag = {"iterations": 0, "converged": True, "fallback": False, "preference": S.preference}

    if m == 1:
        return ClusterResult(np.zeros(1, dtype=np.intp), np.zeros(1, dtype=np.intp), "AP", diag)

    off = s_orig[~np.eye(m, dtype=bool)]
    if np.all(off == off[0]):
        # Message passing cannot break this symmetry; decide it directly.
        if S.preference > off[0]:
            ex = np.arange(m)
            return ClusterResult(ex.copy(), ex, "AP", diag)
        return ClusterResult(np.zeros(m, dtype=np.intp), np.zeros(1, dtype=np.intp), "AP", diag)

    # Deterministic jitter far below data resolution breaks exact ties
    # between interchangeable candidates, which otherwise oscillate.
    rng = np.random.default_rng(0)
    s = s_orig + (np.finfo(float).eps * s_orig + np.finfo(float).tiny * 100) * rng.standard_normal((m, m))

    R = np.zeros((m, m))
    A = np.zeros((m, m))
    ind = np.arange(m)
    history = np.zeros((m, convergence_iter), dtype=bool)
    converged = False
    it = 0
    for it in range(max_iter):
        AS = A + s
        first = np.argmax(AS, axis=1)
        first_val = AS[ind, first]
        AS[ind, first] = -np.inf
        second_val = AS.max(axis=1)
        R_new = s - first_val[:, None]
        R_new[ind, first] = s[ind, first] - second_val
        R = damping * R + (1 - damping) * R_new

        Rp = np.maximum(R, 0)
        Rp[ind, ind] = R[ind, ind]
        A_new = Rp.sum(axis=0)[None, :] - Rp
        self_avail = A_new[ind, ind].copy()
        A_new = np.minimum(A_new, 0)
        A_new[ind, ind] = self_avail
        A = damping * A + (1 - damping) * A_new

        is_ex = (A[ind, ind] + R[ind, ind]) > 0
        history[:, it % convergence_iter] = is_ex
        if it + 1 >= convergence_iter:
            stable = history.sum(axis=1)
            if np.all((stable == 0) | (stable == convergence_iter)) and is_ex.any():
                converged = True
                break

    evidence = A[ind, ind] + R[ind, ind]
    exemplars = np.flatnonzero(evidence > 0)
    diag["iterations"] = it + 1
    diag["converged"] = converged
    if exemplars.size == 0:
        exemplars = np.array([int(np.argmax(evidence))])
        diag["fallback"] = True
        log.warning("affinity propagation found no exemplar in %d iterations; using sole best candidate", it + 1)
    elif not converged:
        log.info("affinity propagation hit max_iter=%d before the exemplar set stabilised", max_iter)

    assign = exemplars[np.argmax(s_orig[:, exemplars], axis=1)]
    assign[exemplars] = exemplars
    labels, ex = relabel(assign, exemplars)
    diag["net_similarity"] = net_similarity(s_orig, ex)
    return ClusterResult(labels, ex, "AP", diag)
