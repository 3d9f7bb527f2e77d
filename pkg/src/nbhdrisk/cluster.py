"""Gaussian mixture clustering with EM, BIC model choice and class profiles.

BIC is reported as ``2 * loglik - n_params * ln(n)`` and maximised.

Covariances carry a small ridge: each component's scatter matrix gets
``c * I`` added before dividing by its soft count, with ``c = 1e-6 *`` the
mean column variance. That is the exact M-step for the penalised objective
``loglik - c/2 * sum_k tr(inv(Sigma_k))``, so EM increases the penalised
objective monotonically. The penalty is what the in-loop check watches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import mahalanobis_sq

FAMILIES = ("spherical", "diagonal", "full")
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmFit:
    K: int
    family: str
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray  # always stored as K x d x d
    log_likelihood: float
    objective: float
    n_params: int
    responsibilities: np.ndarray
    n_iter: int
    converged: bool
    trace: tuple = field(default=(), repr=False)
    loglik_trace: tuple = field(default=(), repr=False)

    @property
    def labels(self):
        return np.argmax(self.responsibilities, axis=1)


def n_parameters(K, d, family):
    cov = {"spherical": K, "diagonal": K * d, "full": K * d * (d + 1) // 2}[family]
    return K * d + (K - 1) + cov


def _estep(X, weights, means, chols):
    n, d = X.shape
    K = weights.shape[0]
    logp = np.empty((n, K))
    for k in range(K):
        logdet = 2.0 * np.log(np.diag(chols[k])).sum()
        logp[:, k] = (math.log(weights[k]) - 0.5 * (d * LOG_2PI + logdet)
                      - 0.5 * mahalanobis_sq(X, means[k], chols[k]))
    top = logp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return float(lse.sum()), np.exp(logp - lse[:, None])


def _mstep(X, R, family, ridge):
    n, d = X.shape
    Nk = R.sum(axis=0)
    # fewer than d + 1 members cannot pin down a covariance; such components
    # chase single points and make the likelihood unbounded
    if np.any(Nk < d + 1 - 1e-9):
        raise DegenerateFitError("mixture component has fewer than d + 1 members")
    weights = Nk / n
    means = (R.T @ X) / Nk[:, None]
    K = R.shape[1]
    covs = np.empty((K, d, d))
    for k in range(K):
        D = X - means[k]
        if family == "full":
            S = (R[:, k, None] * D).T @ D
            covs[k] = (S + ridge * np.eye(d)) / Nk[k]
        elif family == "diagonal":
            s = (R[:, k, None] * D * D).sum(axis=0)
            covs[k] = np.diag((s + ridge) / Nk[k])
        else:
            s = (R[:, k] * (D * D).sum(axis=1)).sum()
            covs[k] = np.eye(d) * (s + ridge * d) / (Nk[k] * d)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return weights, means, covs


def _penalty(covs, chols, ridge):
    total = 0.0
    for L in chols:
        Linv = np.linalg.inv(L)
        total += (Linv * Linv).sum()  # tr(inv(Sigma)) = ||inv(L)||_F^2
    return -0.5 * ridge * total


def _farthest_point_labels(X, K, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    dmin = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(dmin))
        centers.append(nxt)
        dmin = np.minimum(dmin, ((X - X[nxt]) ** 2).sum(axis=1))
    dist = np.stack([((X - X[c]) ** 2).sum(axis=1) for c in centers], axis=1)
    labels = np.argmin(dist, axis=1)
    R = np.zeros((n, K))
    R[np.arange(n), labels] = 1.0
    return R


def _run_em(X, K, family, rng, ridge, tol, max_iter, check_tol):
    R = _farthest_point_labels(X, K, rng)
    weights, means, covs = _mstep(X, R, family, ridge)
    trace, ll_trace = [], []
    prev = -math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            chols = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            raise DegenerateFitError("covariance lost positive definiteness") from None
        loglik, R = _estep(X, weights, means, chols)
        obj = loglik + _penalty(covs, chols, ridge)
        if obj < prev - check_tol * max(1.0, abs(prev)):
            raise AssertionError(
                f"EM objective decreased at iteration {it}: {prev!r} -> {obj!r}")
        trace.append(obj)
        ll_trace.append(loglik)
        if abs(obj - prev) <= tol * abs(obj):
            converged = True
            break
        prev = obj
        weights, means, covs = _mstep(X, R, family, ridge)
    return weights, means, covs, loglik, obj, R, it, converged, tuple(trace), tuple(ll_trace)


def _ridge(X):
    v = float(X.var(axis=0).mean())
    return 1e-6 * v


def fit_gmm(data, K, family="full", seed=0, n_restarts=10, tol=1e-8, max_iter=500,
            check_tol=1e-12):
    """Fit a K-component Gaussian mixture by EM; keep the best of ``n_restarts``.

    Each restart seeds with a random row, then adds the farthest remaining
    rows as centres. ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if family not in FAMILIES:
        raise ValueError(f"unknown covariance family {family!r}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of rows ({n})")
    if np.isnan(X).any():
        raise ValueError("mixture input contains missing values")
    if np.all(X == X[0]):
        raise DegenerateFitError("all rows are identical")
    ridge = _ridge(X)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    best, errors = None, []
    for child in ss.spawn(n_restarts):
        try:
            res = _run_em(X, K, family, np.random.default_rng(child), ridge, tol, max_iter,
                          check_tol)
        except DegenerateFitError as exc:
            errors.append(str(exc))
            continue
        if best is None or res[4] > best[4]:
            best = res
    if best is None:
        raise DegenerateFitError(f"all {n_restarts} restarts failed: {errors[0]}")
    weights, means, covs, loglik, obj, R, it, conv, trace, ll_trace = best
    return GmmFit(K=K, family=family, weights=weights, means=means, covariances=covs,
                  log_likelihood=float(loglik), objective=float(obj),
                  n_params=n_parameters(K, d, family), responsibilities=R,
                  n_iter=it, converged=conv, trace=trace, loglik_trace=ll_trace)


def bic(fit, n):
    return 2.0 * fit.log_likelihood - fit.n_params * math.log(n)


@dataclass(frozen=True)
class BicRow:
    K: int
    family: str
    bic: float
    loglik: float
    n_params: int
    error: str = ""


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    fit: GmmFit
    bic: float
    bic_table: tuple


def candidate_seed(seed, K, family):
    return np.random.SeedSequence(entropy=seed, spawn_key=(K, FAMILIES.index(family)))


def pick_best(rows, tie_tol=1e-9):
    """Index of the winning row: max BIC, ties by fewer params then smaller K."""
    ok = [i for i, r in enumerate(rows) if not r.error]
    if not ok:
        raise DegenerateFitError("every candidate mixture failed to fit")
    top = max(rows[i].bic for i in ok)
    tied = [i for i in ok if rows[i].bic >= top - tie_tol]
    return min(tied, key=lambda i: (rows[i].n_params, rows[i].K,
                                    FAMILIES.index(rows[i].family)))


def select_model(data, k_range=range(1, 10), families=FAMILIES, seed=0, n_restarts=10):
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    rows, fits = [], []
    for K in k_range:
        for fam in families:
            try:
                if K > n:
                    raise ValueError(f"K={K} exceeds rows")
                f = fit_gmm(X, K, fam, seed=candidate_seed(seed, K, fam), n_restarts=n_restarts)
            except (DegenerateFitError, ValueError) as exc:
                rows.append(BicRow(K, fam, math.nan, math.nan, n_parameters(K, X.shape[1], fam),
                                   error=str(exc)))
                fits.append(None)
                continue
            rows.append(BicRow(K, fam, bic(f, n), f.log_likelihood, f.n_params))
            fits.append(f)
    best = pick_best(rows)
    fit = fits[best]
    return ClusterAssignment(labels=fit.labels, fit=fit, bic=rows[best].bic, bic_table=tuple(rows))


def relabel_by_response(labels, response):
    """Renumber classes 0..K-1 by ascending mean response (class 0 = lowest)."""
    labels = np.asarray(labels)
    ids = sorted(set(labels.tolist()))
    means = {c: float(np.nanmean(response[labels == c])) for c in ids}
    order = sorted(ids, key=lambda c: (means[c], c))
    remap = {old: new for new, old in enumerate(order)}
    return np.array([remap[c] for c in labels.tolist()], dtype=int)


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    size: int
    means: dict
    medians: dict
    undefined: bool = False


def class_profile(labels, table, n_classes=None):
    """Per-class mean and median of every factor plus the response."""
    labels = np.asarray(labels)
    if labels.shape[0] != table.n_rows:
        raise ValueError("labels do not align with table rows")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    cols = ["response", *table.factor_names]
    out = []
    for c in range(n_classes):
        member = labels == c
        if not member.any():
            nan = {k: math.nan for k in cols}
            out.append(ClassProfile(c, 0, nan, dict(nan), undefined=True))
            continue
        means, medians = {}, {}
        for k in cols:
            v = table.column(k)[member]
            v = v[~np.isnan(v)]
            means[k] = float(v.mean()) if v.size else math.nan
            medians[k] = float(np.median(v)) if v.size else math.nan
        out.append(ClassProfile(c, int(member.sum()), means, medians))
    return out


def adjusted_rand_index(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return (x * (x - 1) / 2.0).sum()

    n = a.shape[0]
    sum_ij = comb2(table)
    sum_a = comb2(table.sum(axis=1))
    sum_b = comb2(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2.0)
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return float((sum_ij - expected) / (top - expected))
