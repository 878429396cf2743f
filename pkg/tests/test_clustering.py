import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from decoytrap.clustering import (
    affinity_propagation,
    aic,
    bic,
    dbcv,
    dbcv_details,
    default_minpts_candidates,
    estimate_bandwidth,
    extract_clusters,
    gmm_em,
    gmm_select,
    mean_shift,
    n_free_parameters,
    net_similarity,
    optics,
    reachability_distance,
    select_minpts,
    shift_vector,
    similarity_matrix,
)
from decoytrap.clustering.gmm import GmmModel


def blobs(seed, n=(20, 20), sep=10.0, dim=2, spread=0.3):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(i * sep, spread, (k, dim)) for i, k in enumerate(n)]
    return np.vstack(parts), np.repeat(np.arange(len(n)), n)


# -- affinity propagation ---------------------------------------------------


def test_similarity_examples():
    S = similarity_matrix([[0, 0], [3, 4]])
    assert S.values[0, 1] == -25
    same = similarity_matrix(np.zeros((4, 2)))
    assert not same.values[~np.eye(4, dtype=bool)].any()
    one = similarity_matrix([[1.0, 2.0]], preference=-3.0)
    assert one.values.tolist() == [[-3.0]]


def test_ap_single_point_and_identical_points():
    r = affinity_propagation(similarity_matrix([[5.0]]))
    assert r.exemplars.tolist() == [0] and r.labels.tolist() == [0]
    assert affinity_propagation(similarity_matrix(np.ones((6, 3)))).n_clusters == 1


def test_ap_two_triads_matches_exhaustive_optimum():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.uniform(-0.01, 0.01, (3, 2)), 10 + rng.uniform(-0.01, 0.01, (3, 2))])
    r = affinity_propagation(similarity_matrix(X))
    S, _ = oracles.similarity(X.tolist())
    _, best = oracles.best_exemplars(S)
    assert r.n_clusters == 2
    assert set(r.exemplars.tolist()) == best


def test_ap_median_preference_matches_oracle():
    X = np.random.default_rng(2).normal(size=(7, 2))
    _, pref = oracles.similarity(X.tolist())
    assert similarity_matrix(X).preference == pytest.approx(pref, abs=1e-12)


def test_ap_invariant_under_constant_shift():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(int(rng.integers(3, 9)), 2))
        S = similarity_matrix(X)
        shifted = type(S)(S.values - 7.5, S.preference - 7.5)
        a = affinity_propagation(S)
        b = affinity_propagation(shifted)
        opt, best = oracles.best_exemplars(S.values.tolist())
        if abs(net_similarity(S, a.exemplars) - opt) < 1e-6:
            hits += 1
            assert set(b.exemplars.tolist()) == set(a.exemplars.tolist())
    assert hits >= 15


def test_ap_result_invariants():
    X, _ = blobs(0, (10, 10, 10))
    r = affinity_propagation(similarity_matrix(X))
    r.validate()
    assert r.diagnostics["converged"]
    assert r.n_clusters == 3


def test_ap_rejects_bad_damping():
    with pytest.raises(ValueError):
        affinity_propagation(similarity_matrix(np.eye(3)), damping=0.3)


# -- mean shift -------------------------------------------------------------


def test_bandwidth_examples():
    assert estimate_bandwidth([[0.0], [10.0]], 0.5) == 10
    assert estimate_bandwidth(np.zeros((5, 2))) == 1e-6
    X = np.arange(10.0)[:, None]
    gaps = [abs(i - j) for i in range(10) for j in range(i + 1, 10)]
    assert len(gaps) == 45
    assert estimate_bandwidth(X, 0.3) == pytest.approx(oracles.quantile_linear(gaps, 0.3))


def test_mean_shift_identical_points():
    r = mean_shift(np.full((5, 2), 3.0), 1.0)
    assert r.n_clusters == 1
    np.testing.assert_allclose(r.diagnostics["modes"][0], [3.0, 3.0])
    assert r.diagnostics["iterations"] == 0


def test_mean_shift_two_points_merge():
    X = np.array([[0.0], [1.0]])
    r = mean_shift(X, 10.0)
    # Oracle: iterate the fixed point by hand.
    traj = []
    for x0 in (0.0, 1.0):
        x = x0
        for _ in range(1000):
            w = np.exp(-((X[:, 0] - x) ** 2) / (2 * 100))
            nxt = float((w * X[:, 0]).sum() / w.sum())
            if abs(nxt - x) < 1e-12:
                break
            x = nxt
        traj.append(x)
    assert abs(traj[0] - traj[1]) < 5.0
    assert r.n_clusters == 1
    assert r.diagnostics["modes"][0][0] == pytest.approx(0.5, abs=0.01)


def test_mean_shift_far_clouds():
    rng = np.random.default_rng(0)
    h = 1.0
    X = np.vstack([rng.normal(0, 0.3, (15, 2)), rng.normal(100 * h, 0.3, (15, 2))])
    cross = np.exp(-((100 * h - 3) ** 2) / (2 * h * h))
    assert cross < 1e-30
    assert mean_shift(X, h).n_clusters == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 40))
def test_mean_shift_modes_are_stationary(seed, m):
    X = np.random.default_rng(seed).normal(size=(m, 2))
    h = estimate_bandwidth(X)
    r = mean_shift(X, h)
    if r.diagnostics["unconverged"]:
        return
    # Each cluster's converged points stopped with ||m|| < tol; the greedy
    # merge keeps the first (densest) of them as the mode.
    mv = shift_vector(np.asarray(r.diagnostics["modes"]), X, h)
    assert np.all(np.linalg.norm(mv, axis=1) < r.diagnostics["tol"])
    r.validate()


# -- gaussian mixtures ------------------------------------------------------


def test_aic_bic_formulas():
    assert aic(3, -10) == 26
    assert bic(3, 100, -10) == pytest.approx(33.8155, abs=1e-3)
    assert n_free_parameters(2, 2) == 2 * (2 + 3) + 1


def test_single_component_closed_form():
    X = np.random.default_rng(0).normal(size=(50, 3))
    g = gmm_em(X, 1, reg_floor=1e-6)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.covariances[0], np.cov(X.T, bias=True) + 1e-6 * np.eye(3), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_log_likelihood_monotone(seed, k):
    X, _ = blobs(seed % 97, (15, 15, 15), sep=4.0)
    g = gmm_em(X, k, seed=seed)
    h = g.history
    for i in range(1, len(h)):
        if i in g.reseeded_at:
            continue
        assert h[i] >= h[i - 1] - 1e-8


def test_density_integrates_to_one():
    X, _ = blobs(5, (30, 30), sep=5.0, spread=0.8)
    g = gmm_em(X, 2, seed=0)
    sd = np.sqrt(np.max([np.diag(c) for c in g.covariances]))
    lo = g.means.min(axis=0) - 7 * sd
    hi = g.means.max(axis=0) + 7 * sd
    rng = np.random.default_rng(0)
    pts = rng.uniform(lo, hi, (400_000, 2))
    integral = g.density(pts).mean() * np.prod(hi - lo)
    assert integral == pytest.approx(1.0, rel=0.02)


def test_bic_single_gaussian():
    hits = 0
    for seed in range(20):
        X = np.random.default_rng(seed).standard_normal((200, 2))
        r = gmm_select(X, k_max=3, seed=seed)
        scores = r.diagnostics["scores"]
        assert r.diagnostics["chosen_k"] == min(scores, key=scores.get)
        hits += r.diagnostics["chosen_k"] == 1
    assert hits >= 18


def test_bic_two_gaussians():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0, 1, 100), rng.normal(100, 1, 100)])[:, None]
    r = gmm_select(X, k_max=3)
    s = r.diagnostics["scores"]
    assert s[2] < s[1]
    assert r.diagnostics["chosen_k"] == 2


def test_identical_points_select_one():
    r = gmm_select(np.ones((3, 2)), k_max=5)
    assert max(r.diagnostics["scores"]) == 3
    assert r.n_clusters == 1


def test_gmm_rejects_too_many_components():
    with pytest.raises(ValueError):
        gmm_em(np.zeros((2, 1)), 3)


def test_gmm_model_properties():
    g = gmm_em(np.random.default_rng(0).normal(size=(30, 2)), 2)
    assert isinstance(g, GmmModel)
    assert g.aic == pytest.approx(2 * g.n_parameters - 2 * g.log_likelihood)
    np.testing.assert_allclose(g.responsibilities(np.zeros((1, 2))).sum(), 1.0)


def test_gmm_deterministic():
    X, _ = blobs(3, (20, 20))
    a = gmm_select(X, seed=4)
    b = gmm_select(X, seed=4)
    assert np.array_equal(a.labels, b.labels)


# -- OPTICS and DBCV --------------------------------------------------------


def test_core_and_reachability_examples():
    o = optics([[0.0], [1.0], [5.0]], 2)
    assert o.core_distance[0] == 1
    assert reachability_distance(2.0, 5.0) == 5.0
    assert reachability_distance(2.0, 1.0) == 2.0


@pytest.mark.parametrize("seed", range(10))
def test_optics_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 60))
    X = rng.normal(size=(m, int(rng.integers(1, 4))))
    if seed % 3 == 0:
        X = np.round(X, 1)  # force ties
    mp = int(rng.integers(2, m + 1))
    o = optics(X, mp)
    order, reach, core = oracles.brute_optics(X.tolist(), mp)
    assert o.order.tolist() == order
    assert o.reachability.tolist() == reach
    assert o.core_distance.tolist() == core


def test_optics_errors():
    with pytest.raises(ValueError):
        optics(np.zeros((3, 1)), 4)
    with pytest.raises(ValueError):
        optics(np.zeros((3, 1)), 1)


def test_extract_two_groups():
    X, _ = blobs(1, (10, 10), sep=20.0, spread=0.2)
    o = optics(X, 3)
    seq = o.ordered_reachability
    cut = oracles.quantile_linear(seq[1:].tolist(), 0.75)
    assert sum(1 for v in seq[1:] if v > cut) >= 1
    assert max(seq[1:]) > cut
    r = extract_clusters(o)
    r.validate()
    assert r.n_clusters >= 2
    # Every cluster stays on one side of the gap.
    for c in range(r.n_clusters):
        sides = set((X[r.labels == c, 0] > 10).tolist())
        assert len(sides) == 1


def test_extract_equally_spaced_is_one_cluster():
    r = extract_clusters(optics(np.arange(12.0)[:, None], 2))
    assert r.n_clusters == 1


def test_extract_identical_points():
    r = extract_clusters(optics(np.zeros((4, 2)), 4))
    assert r.n_clusters == 1 and r.exemplars.tolist() == [0]


def test_reachability_csv():
    text = optics(np.arange(4.0)[:, None], 2).to_csv()
    assert text.splitlines()[0] == "position,point,reachability"
    assert "inf" in text.splitlines()[1]


def test_dbcv_matches_direct_formula():
    X, y = blobs(0, (5, 5), sep=10.0)
    ours = dbcv(X, y)
    ref = oracles.dbcv(X.tolist(), y.tolist())
    assert ours > 0
    assert ours == pytest.approx(ref, abs=1e-9)
    perm = np.random.default_rng(0).permutation(y)
    assert dbcv(X, perm) == pytest.approx(oracles.dbcv(X.tolist(), perm.tolist()), abs=1e-9)
    assert dbcv(X, perm) < ours


@pytest.mark.parametrize("seed", range(5))
def test_dbcv_matches_oracle_three_clusters(seed):
    X, y = blobs(seed, (6, 7, 5), sep=3.0, dim=3, spread=0.8)
    assert dbcv(X, y) == pytest.approx(oracles.dbcv(X.tolist(), y.tolist()), abs=1e-9)


def test_dbcv_single_cluster_and_singletons():
    X, _ = blobs(0)
    assert dbcv(X, np.zeros(len(X))) == -1
    labels = np.zeros(len(X), dtype=int)
    labels[0] = 1
    d = dbcv_details(X, labels)
    assert d["singleton_clusters"] == 1
    assert d["validity"][1] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_dbcv_scale_invariant(seed, lam):
    X, y = blobs(seed % 50, (6, 6), sep=4.0)
    assert dbcv(X * lam, y) == pytest.approx(dbcv(X, y), abs=1e-9)


def test_select_minpts_examples():
    X, y = blobs(2, (15, 15), sep=10.0)
    mp, r = select_minpts(X, [2])
    assert mp == 2
    mp, r = select_minpts(X, [2, 3, 5])
    assert r.n_clusters == 2
    scores = r.diagnostics["dbcv_scores"]
    assert r.diagnostics["dbcv"] == max(scores.values())
    assert r.diagnostics["dbcv"] == pytest.approx(oracles.dbcv(X.tolist(), r.labels.tolist()), abs=1e-9)
    mp, _ = select_minpts(X, [2, 3, 500])
    assert mp in (2, 3)
    with pytest.raises(ValueError):
        select_minpts(X, [100, 500])


def test_default_candidates():
    assert default_minpts_candidates(100) == [2, 3, 5]
    assert default_minpts_candidates(1000) == [2, 3, 5, 7]
    assert default_minpts_candidates(3) == [2, 3]


def test_results_serialise():
    X, _ = blobs(0)
    r = select_minpts(X)[1]
    assert '"OPTICS"' in r.to_json()


def test_methods_deterministic():
    X, _ = blobs(7, (12, 12, 12))
    for fn in (
        lambda: affinity_propagation(similarity_matrix(X)),
        lambda: mean_shift(X, estimate_bandwidth(X)),
        lambda: select_minpts(X)[1],
    ):
        assert np.array_equal(fn().labels, fn().labels)


def test_net_similarity_agrees_with_oracle():
    X = np.random.default_rng(9).normal(size=(6, 2))
    S = similarity_matrix(X)
    for ex in ([0], [1, 4], [0, 2, 5]):
        assert net_similarity(S, ex) == pytest.approx(oracles.net_similarity(S.values.tolist(), ex))
    assert math.isfinite(net_similarity(S, range(6)))
