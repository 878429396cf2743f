"""OPTICS reachability ordering, threshold-cut cluster extraction, DBCV scoring
and DBCV-driven ``min_pts`` selection."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .distance import as_matrix, pairwise_dists
from .result import ClusterResult, relabel

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD_QUANTILE = 0.75


@dataclass
class ReachabilityOrdering:
    """Output of :func:`optics`.

    ``reachability`` and ``core_distance`` are indexed by point, not by
    position; ``reachability[order[0]]`` is ``inf``.
    """

    order: np.ndarray
    reachability: np.ndarray
    core_distance: np.ndarray
    min_pts: int
    distances: np.ndarray = field(repr=False)

    @property
    def ordered_reachability(self) -> np.ndarray:
        return self.reachability[self.order]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "point", "reachability"])
        for pos, p in enumerate(self.order):
            w.writerow([pos, int(p), repr(float(self.reachability[p]))])
        return buf.getvalue()


def reachability_distance(core_p: float, dist_pq: float) -> float:
    return max(core_p, dist_pq)


def core_distances(D: np.ndarray, min_pts: int) -> np.ndarray:
    """Distance to the ``min_pts``-th nearest point, counting the point itself."""
    return np.sort(D, axis=1)[:, min_pts - 1]


def optics(X, min_pts: int) -> ReachabilityOrdering:
    """OPTICS with an unbounded generating radius.

    Expansion starts at point 0; the next point is always the unprocessed one
    with the smallest reachability, ties going to the lower index.
    """
    X = as_matrix(X)
    m = X.shape[0]
    if min_pts < 2:
        raise ValueError("min_pts must be at least 2")
    if min_pts > m:
        raise ValueError(f"min_pts={min_pts} exceeds the {m} available points")
    D = pairwise_dists(X)
    core = core_distances(D, min_pts)
    reach = np.full(m, np.inf)
    open_reach = np.full(m, np.inf)
    done = np.zeros(m, dtype=bool)
    order = np.empty(m, dtype=np.intp)
    for step in range(m):
        # argmin returns the first minimum, i.e. the lowest index on ties.
        # Processed points hold +inf, so they only win when nothing is
        # reachable, and then the lowest unprocessed index seeds instead.
        p = int(np.argmin(open_reach)) if step else 0
        if done[p]:
            p = int(np.flatnonzero(~done)[0])
        order[step] = p
        reach[p] = open_reach[p]
        done[p] = True
        open_reach[p] = np.inf
        cand = np.maximum(core[p], D[p])
        upd = ~done & (cand < open_reach)
        open_reach[upd] = cand[upd]
    return ReachabilityOrdering(order, reach, core, int(min_pts), D)


def medoid(D: np.ndarray, members: np.ndarray) -> int:
    sub = D[np.ix_(members, members)]
    return int(members[np.argmin(sub.sum(axis=1))])


def extract_clusters(
    ordering: ReachabilityOrdering,
    threshold_quantile: float = DEFAULT_THRESHOLD_QUANTILE,
) -> ClusterResult:
    """Cut the reachability plot at a quantile of its finite values.

    A point above the cut that is directly followed by a point at or below
    it opens a new cluster; the run of points at or below the cut that
    follows belongs to that cluster. Remaining above-cut points join the
    cluster whose medoid is nearest, so every point ends up clustered.
    """
    if not 0 < threshold_quantile <= 1:
        raise ValueError("threshold_quantile must lie in (0, 1]")
    D = ordering.distances
    m = len(ordering.order)
    seq = ordering.ordered_reachability
    finite = seq[np.isfinite(seq)]
    diag = {"min_pts": ordering.min_pts, "threshold_quantile": threshold_quantile}
    everyone = np.arange(m)
    if finite.size == 0:
        ex = medoid(D, everyone)
        diag["cut"] = math.inf
        return ClusterResult(np.zeros(m, dtype=np.intp), np.array([ex]), "OPTICS", diag)

    cut = float(np.quantile(finite, threshold_quantile))
    diag["cut"] = cut
    above = seq > cut
    groups: list[list[int]] = []
    orphans: list[int] = []
    for pos in range(m):
        point = int(ordering.order[pos])
        if above[pos]:
            if pos + 1 < m and not above[pos + 1]:
                groups.append([point])
            else:
                orphans.append(point)
        else:
            # Position 0 is always above the cut, so a group is open here.
            groups[-1].append(point)

    if not groups:
        ex = medoid(D, everyone)
        return ClusterResult(np.zeros(m, dtype=np.intp), np.array([ex]), "OPTICS", diag)

    assign = np.empty(m, dtype=np.intp)
    exemplars = []
    for g in groups:
        members = np.asarray(sorted(g), dtype=np.intp)
        ex = medoid(D, members)
        exemplars.append(ex)
        assign[members] = ex
    ex_arr = np.asarray(exemplars)
    for p in orphans:
        assign[p] = ex_arr[np.argmin(D[p, ex_arr])]
    diag["orphans"] = len(orphans)
    labels, ex = relabel(assign, exemplars)
    return ClusterResult(labels, ex, "OPTICS", diag)


def _mst_edges(W: np.ndarray) -> list[tuple[int, int, float]]:
    """Prim's tree under the strict edge order (weight, low end, high end).

    Mutual reachability weights tie often; a strict order makes the tree
    unique, so internal nodes do not depend on the algorithm used.
    """
    n = W.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = W[0].copy()
    parent = np.zeros(n, dtype=np.intp)
    in_tree[0] = True
    best[0] = np.inf
    idx = np.arange(n)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        ties = np.flatnonzero(cand == cand.min())
        if ties.size > 1:
            lo = np.minimum(parent[ties], ties)
            hi = np.maximum(parent[ties], ties)
            v = int(ties[np.lexsort((hi, lo))[0]])
        else:
            v = int(ties[0])
        edges.append((int(parent[v]), v, float(W[parent[v], v])))
        in_tree[v] = True
        out = ~in_tree
        w = W[v]
        same = out & (w == best)
        # On equal weight keep the lexicographically smaller edge.
        swap = same & (
            (np.minimum(v, idx) < np.minimum(parent, idx))
            | ((np.minimum(v, idx) == np.minimum(parent, idx)) & (np.maximum(v, idx) < np.maximum(parent, idx)))
        )
        closer = (out & (w < best)) | swap
        best[closer] = w[closer]
        parent[closer] = v
    return edges


def _all_points_core(Dc: np.ndarray, dim: int) -> np.ndarray:
    """Inverse-power-mean of within-cluster distances (all-points core distance)."""
    n = Dc.shape[0]
    with np.errstate(divide="ignore"):
        logs = -dim * np.log(Dc)
    mask = ~np.eye(n, dtype=bool)
    core = np.empty(n)
    for o in range(n):
        vals = logs[o][mask[o]]
        top = vals.max()
        if np.isinf(top):
            core[o] = 0.0
            continue
        lse = top + math.log(np.exp(vals - top).sum())
        core[o] = math.exp(-(lse - math.log(n - 1)) / dim)
    return core


def dbcv_details(X, labels) -> dict:
    """Density-based clustering validation: per-cluster validity plus the
    size-weighted total. Scale invariant."""
    X = as_matrix(X)
    labels = np.asarray(labels)
    n, dim = X.shape
    ids = np.unique(labels)
    if ids.size < 2:
        return {"score": -1.0, "validity": {}, "singleton_clusters": 0}
    D = pairwise_dists(X)
    members = {c: np.flatnonzero(labels == c) for c in ids}
    core = np.zeros(n)
    internal: dict = {}
    sparseness: dict = {}
    singletons = 0
    for c, idx in members.items():
        if idx.size == 1:
            singletons += 1
            continue
        Dc = D[np.ix_(idx, idx)]
        core[idx] = _all_points_core(Dc, dim)
        W = np.maximum(Dc, np.maximum(core[idx][:, None], core[idx][None, :]))
        edges = _mst_edges(W)
        degree = np.zeros(idx.size, dtype=int)
        for a, b, _ in edges:
            degree[a] += 1
            degree[b] += 1
        inner = degree > 1
        inner_edges = [w for a, b, w in edges if inner[a] and inner[b]]
        if not inner.any():
            inner = np.ones(idx.size, dtype=bool)
        if not inner_edges:
            inner_edges = [w for _, _, w in edges]
        internal[c] = idx[inner]
        sparseness[c] = max(inner_edges)

    validity = {}
    for c, idx in members.items():
        if c not in internal:
            validity[c] = 0.0
            continue
        sep = math.inf
        for o in ids:
            if o == c or o not in internal:
                continue
            a, b = internal[c], internal[o]
            mr = np.maximum(D[np.ix_(a, b)], np.maximum(core[a][:, None], core[b][None, :]))
            sep = min(sep, float(mr.min()))
        if not math.isfinite(sep):
            validity[c] = 0.0
            continue
        denom = max(sep, sparseness[c])
        validity[c] = 0.0 if denom == 0 else (sep - sparseness[c]) / denom
    score = sum(len(members[c]) / n * v for c, v in validity.items())
    return {"score": float(score), "validity": validity, "singleton_clusters": singletons}


def dbcv(X, labels) -> float:
    """DBCV index in [-1, 1]; a single-cluster labeling scores -1."""
    return dbcv_details(X, labels)["score"]


def default_minpts_candidates(m: int) -> list[int]:
    raw = {2, 3, 5, max(5, math.ceil(math.log(m))) if m > 1 else 5}
    return sorted({min(max(c, 2), m) for c in raw if m >= 2})


def select_minpts(
    X,
    candidates: list[int] | None = None,
    threshold_quantile: float = DEFAULT_THRESHOLD_QUANTILE,
) -> tuple[int, ClusterResult]:
    """Run OPTICS for each candidate and keep the best-scoring clustering.

    Ties go to the smaller ``min_pts``. Candidates outside [2, M] are skipped.
    """
    X = as_matrix(X)
    m = X.shape[0]
    if candidates is None:
        candidates = default_minpts_candidates(m)
    valid = sorted({int(c) for c in candidates if 2 <= int(c) <= m})
    if not valid:
        raise ValueError(f"no min_pts candidate within [2, {m}] among {list(candidates)}")
    best: tuple[float, int, ClusterResult] | None = None
    scores = {}
    for mp in valid:
        result = extract_clusters(optics(X, mp), threshold_quantile)
        score = dbcv(X, result.labels)
        scores[mp] = score
        if best is None or score > best[0]:
            best = (score, mp, result)
    score, mp, result = best
    result.diagnostics.update({"dbcv": score, "chosen_min_pts": mp, "dbcv_scores": scores})
    return mp, result
