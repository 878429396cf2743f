"""Independent reference computations used to check the library.

Everything here is plain Python over lists, written directly from the
definitions and sharing no code with the package.
"""
from __future__ import annotations

import itertools
import math


def sq_dist(a, b) -> float:
    # Same accumulation order as the library (coordinate by coordinate), so
    # distances agree bit for bit.
    s = 0.0
    for x, y in zip(a, b):
        d = x - y
        s += d * d
    return s


def dist(a, b) -> float:
    return math.sqrt(sq_dist(a, b))


def brute_optics(points, min_pts):
    """OPTICS with unbounded radius, lowest index first on ties.

    Returns (order, reachability by point, core distance by point).
    """
    m = len(points)
    D = [[dist(points[i], points[j]) for j in range(m)] for i in range(m)]
    core = [sorted(D[i])[min_pts - 1] for i in range(m)]
    reach = [math.inf] * m
    processed = [False] * m
    order = []
    while len(order) < m:
        best = None
        for i in range(m):
            if processed[i]:
                continue
            if best is None or reach[i] < reach[best]:
                best = i
        p = best
        processed[p] = True
        order.append(p)
        for q in range(m):
            if not processed[q]:
                r = max(core[p], D[p][q])
                if r < reach[q]:
                    reach[q] = r
    return order, reach, core


def net_similarity(S, exemplars) -> float:
    ex = sorted(set(exemplars))
    total = 0.0
    for i in range(len(S)):
        if i in ex:
            total += S[i][i]
        else:
            total += max(S[i][k] for k in ex)
    return total


def best_exemplars(S):
    """Exhaustive search over every non-empty exemplar subset."""
    m = len(S)
    best_val, best_set = -math.inf, None
    for r in range(1, m + 1):
        for subset in itertools.combinations(range(m), r):
            v = net_similarity(S, subset)
            if v > best_val:
                best_val, best_set = v, subset
    return best_val, set(best_set)


def similarity(points, preference=None):
    m = len(points)
    S = [[-sq_dist(points[i], points[j]) for j in range(m)] for i in range(m)]
    if preference is None:
        off = sorted(S[i][j] for i in range(m) for j in range(m) if i != j)
        n = len(off)
        preference = off[n // 2] if n % 2 else 0.5 * (off[n // 2 - 1] + off[n // 2])
    for i in range(m):
        S[i][i] = preference
    return S, preference


def quantile_linear(values, q):
    """Linear-interpolation quantile (numpy's default definition)."""
    v = sorted(values)
    pos = (len(v) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def _mst(weights):
    """Kruskal on a dense symmetric weight table; returns edge list."""
    n = len(weights)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = sorted((weights[i][j], i, j) for i in range(n) for j in range(i + 1, n))
    out = []
    for w, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            out.append((i, j, w))
    return out


def dbcv(points, labels) -> float:
    """DBCV index straight from its definition (all-points core distance,
    mutual reachability MST per cluster, internal nodes and edges)."""
    n = len(points)
    d = len(points[0])
    clusters = sorted(set(labels))
    if len(clusters) < 2:
        return -1.0
    members = {c: [i for i in range(n) if labels[i] == c] for c in clusters}
    core = {}
    for c, idx in members.items():
        if len(idx) < 2:
            continue
        for o in idx:
            acc = 0.0
            for j in idx:
                if j != o:
                    dd = dist(points[o], points[j])
                    acc += math.inf if dd == 0 else (1.0 / dd) ** d
            acc /= len(idx) - 1
            core[o] = 0.0 if math.isinf(acc) else acc ** (-1.0 / d)

    def mreach(i, j):
        return max(core[i], core[j], dist(points[i], points[j]))

    dsc, internal = {}, {}
    for c, idx in members.items():
        if len(idx) < 2:
            continue
        W = [[mreach(i, j) for j in idx] for i in idx]
        edges = _mst(W)
        deg = [0] * len(idx)
        for a, b, _ in edges:
            deg[a] += 1
            deg[b] += 1
        inner = [k for k in range(len(idx)) if deg[k] > 1] or list(range(len(idx)))
        inner_set = set(inner)
        inner_edges = [w for a, b, w in edges if a in inner_set and b in inner_set] or [w for _, _, w in edges]
        dsc[c] = max(inner_edges)
        internal[c] = [idx[k] for k in inner]
    total = 0.0
    for c, idx in members.items():
        if c not in dsc:
            continue
        others = [o for o in clusters if o != c and o in dsc]
        if not others:
            continue
        dspc = min(mreach(i, j) for o in others for i in internal[c] for j in internal[o])
        v = (dspc - dsc[c]) / max(dspc, dsc[c])
        total += len(idx) / n * v
    return total
