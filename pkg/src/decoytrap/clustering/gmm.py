"""Full-covariance Gaussian mixtures fitted by EM, with AIC/BIC order selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .distance import as_matrix
from .result import ClusterResult, relabel

log = logging.getLogger(__name__)

DEFAULT_REG_FLOOR = 1e-6
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-3
DEFAULT_K_MAX = 10
DEFAULT_RESTARTS = 5
CRITERIA = ("AIC", "BIC")


def n_free_parameters(n_components: int, n_features: int) -> int:
    """Means, full covariances and the K-1 free mixing weights."""
    d = n_features
    return n_components * (d + d * (d + 1) // 2) + (n_components - 1)


def aic(n_params: int, log_likelihood: float) -> float:
    return 2.0 * n_params - 2.0 * log_likelihood


def bic(n_params: int, n_samples: int, log_likelihood: float) -> float:
    return n_params * math.log(n_samples) - 2.0 * log_likelihood


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    n_samples: int
    history: list[float] = field(default_factory=list)
    # Iteration indices right after a component was re-seeded; the likelihood
    # may legitimately drop across these.
    reseeded_at: list[int] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    seed: int | None = None

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    @property
    def n_parameters(self) -> int:
        return n_free_parameters(self.n_components, self.n_features)

    @property
    def aic(self) -> float:
        return aic(self.n_parameters, self.log_likelihood)

    @property
    def bic(self) -> float:
        return bic(self.n_parameters, self.n_samples, self.log_likelihood)

    def criterion(self, name: str) -> float:
        return self.aic if name.upper() == "AIC" else self.bic

    def component_log_density(self, X) -> np.ndarray:
        """``log pi_k + log N(x | mu_k, Sigma_k)`` as an (n, K) matrix."""
        X = as_matrix(X)
        return _weighted_log_gauss(X, self.weights, self.means, self.covariances)

    def log_density(self, X) -> np.ndarray:
        return _logsumexp_rows(self.component_log_density(X))

    def density(self, X) -> np.ndarray:
        return np.exp(self.log_density(X))

    def responsibilities(self, X) -> np.ndarray:
        wl = self.component_log_density(X)
        return np.exp(wl - _logsumexp_rows(wl)[:, None])


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def _weighted_log_gauss(X, weights, means, covs) -> np.ndarray:
    n, d = X.shape
    out = np.empty((n, len(weights)))
    const = d * math.log(2 * math.pi)
    for k in range(len(weights)):
        chol = np.linalg.cholesky(covs[k])
        z = np.linalg.solve(chol, (X - means[k]).T)
        maha = (z * z).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        with np.errstate(divide="ignore"):
            logw = np.log(weights[k])
        out[:, k] = logw - 0.5 * (const + logdet + maha)
    return out


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    closest = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            c = int(rng.choice(n, p=closest / total))
        else:
            c = int(rng.integers(n))
        centers.append(c)
        closest = np.minimum(closest, ((X - X[c]) ** 2).sum(axis=1))
    return np.asarray(centers)


def _m_step(X, resp, reg_floor):
    n, d = X.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ X) / safe[:, None]
    covs = np.empty((resp.shape[1], d, d))
    eye = np.eye(d)
    for k in range(resp.shape[1]):
        diff = X - means[k]
        covs[k] = (resp[:, k][:, None] * diff).T @ diff / safe[k] + reg_floor * eye
    return weights, means, covs, nk


def gmm_em(
    X,
    n_components: int,
    seed: int | None = 0,
    reg_floor: float = DEFAULT_REG_FLOOR,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> GmmModel:
    """Fit a K-component mixture by EM from a k-means++ start.

    Stops when the mean per-sample log-likelihood improves by less than
    ``tol`` or after ``max_iter`` E/M rounds.
    """
    X = as_matrix(X)
    n, d = X.shape
    K = int(n_components)
    if K < 1:
        raise ValueError("need at least one component")
    if K > n:
        raise ValueError(f"{K} components requested for {n} points")
    rng = np.random.default_rng(seed)

    centers = _kmeanspp(X, K, rng)
    d2 = np.stack([((X - X[c]) ** 2).sum(axis=1) for c in centers], axis=1)
    resp = np.zeros((n, K))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    # Pin each seed point to its own component so coincident seeds do not
    # leave a component empty on the first M-step.
    resp[centers] = 0.0
    resp[centers, np.arange(K)] = 1.0

    history: list[float] = []
    reseeded_at: list[int] = []
    converged = False
    weights = means = covs = None
    point_ll = None
    it = 0
    for it in range(max_iter):
        weights, means, covs, nk = _m_step(X, resp, reg_floor)
        empty = np.flatnonzero(nk <= 0)
        if empty.size:
            # Re-seed each emptied component on the worst-explained point.
            if point_ll is None:
                point_ll = np.zeros(n)
            taken: set[int] = set()
            pooled = np.cov(X.T, bias=True).reshape(d, d) + reg_floor * np.eye(d)
            for k in empty:
                order = np.argsort(point_ll, kind="stable")
                p = int(next(i for i in order if int(i) not in taken))
                taken.add(p)
                means[k] = X[p]
                covs[k] = pooled
                weights[k] = 1.0 / n
            weights = weights / weights.sum()
            reseeded_at.append(it)
            log.debug("gmm: re-seeded %d empty component(s) at iteration %d", empty.size, it)

        wl = _weighted_log_gauss(X, weights, means, covs)
        point_ll = _logsumexp_rows(wl)
        ll = float(point_ll.sum())
        resp = np.exp(wl - point_ll[:, None])
        history.append(ll)
        if len(history) > 1 and (history[-1] - history[-2]) / n < tol and it not in reseeded_at:
            converged = True
            break

    return GmmModel(
        weights=weights,
        means=means,
        covariances=covs,
        log_likelihood=history[-1],
        n_samples=n,
        history=history,
        reseeded_at=reseeded_at,
        iterations=it + 1,
        converged=converged,
        seed=seed,
    )


def _restart_seed(seed: int | None, k: int, restart: int) -> np.random.SeedSequence:
    base = 0 if seed is None else int(seed)
    return np.random.SeedSequence([base, k, restart])


def gmm_fit_orders(
    X,
    k_max: int = DEFAULT_K_MAX,
    restarts: int = DEFAULT_RESTARTS,
    seed: int | None = 0,
    **em_kwargs,
) -> dict[int, GmmModel]:
    """Best-likelihood model for each order K = 1..min(k_max, n)."""
    X = as_matrix(X)
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    fits: dict[int, GmmModel] = {}
    for k in range(1, min(k_max, X.shape[0]) + 1):
        best = None
        for r in range(restarts):
            model = gmm_em(X, k, seed=_restart_seed(seed, k, r), **em_kwargs)
            if best is None or model.log_likelihood > best.log_likelihood:
                best = model
        fits[k] = best
    return fits


def gmm_select(
    X,
    k_max: int = DEFAULT_K_MAX,
    criterion: str = "BIC",
    restarts: int = DEFAULT_RESTARTS,
    seed: int | None = 0,
    **em_kwargs,
) -> ClusterResult:
    """Pick the mixture order minimising AIC or BIC and harden it into clusters.

    Each point goes to its most responsible component; components that win
    no point are dropped, and each surviving component is represented by
    the member it is most responsible for.
    """
    criterion = criterion.upper()
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    X = as_matrix(X)
    fits = gmm_fit_orders(X, k_max=k_max, restarts=restarts, seed=seed, **em_kwargs)
    scores = {k: m.criterion(criterion) for k, m in fits.items()}
    chosen = min(scores, key=lambda k: (scores[k], k))
    model = fits[chosen]

    resp = model.responsibilities(X)
    hard = np.argmax(resp, axis=1)
    assign = np.empty(X.shape[0], dtype=np.intp)
    exemplars = []
    for comp in np.unique(hard):
        members = np.flatnonzero(hard == comp)
        ex = int(members[np.argmax(resp[members, comp])])
        exemplars.append(ex)
        assign[members] = ex
    labels, ex = relabel(assign, exemplars)
    diag = {
        "chosen_k": chosen,
        "criterion": criterion,
        "scores": {int(k): float(v) for k, v in scores.items()},
        "log_likelihood": model.log_likelihood,
        "iterations": model.iterations,
        "reseeded": bool(model.reseeded_at),
        "empty_components": chosen - len(exemplars),
    }
    return ClusterResult(labels, ex, "GMM", diag)
