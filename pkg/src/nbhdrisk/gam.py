"""Additive models with penalised cubic regression splines.

Each smooth is a ``k``-knot cubic regression spline, reparameterised to sum
to zero over the fitted rows (so the intercept carries the mean) and with
its penalty rescaled to the size of its design block. Smoothing parameters
are picked per term by coordinate-wise GCV search over a log grid.

Identity link fits are penalised least squares. Log link fits (Gaussian
family) use penalised iteratively reweighted least squares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .splines import CrSpline, InsufficientVariationError, quantile_knots

LINKS = ("identity", "log")


class GamError(ValueError):
    pass


@dataclass(frozen=True)
class GamConfig:
    k: int = 10
    link: str = "identity"
    lambda_min: float = 1e-4
    lambda_max: float = 1e4
    n_lambda: int = 30
    tol: float = 1e-6
    max_passes: int = 50

    def __post_init__(self):
        if self.k < 3:
            raise ValueError("basis dimension k must be >= 3")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if not 0 < self.lambda_min < self.lambda_max or self.n_lambda < 2:
            raise ValueError("bad smoothing-parameter grid")

    @property
    def grid(self):
        return np.logspace(math.log10(self.lambda_min), math.log10(self.lambda_max),
                           self.n_lambda)


@dataclass
class SmoothTerm:
    name: str
    k: int
    spline: CrSpline
    Z: np.ndarray            # k x (k-1) sum-to-zero reparameterisation
    penalty: np.ndarray      # (k-1) x (k-1), constrained and rescaled
    penalty_scale: float
    columns: slice
    x: np.ndarray            # observed covariate values used in the fit
    coefficients: np.ndarray = None
    lam: float = math.nan
    edf: float = math.nan
    ref_df: int = 0
    statistic: float = math.nan
    p_value: float = math.nan

    @property
    def knots(self):
        return self.spline.knots

    def design(self, x):
        return self.spline.evaluate(x) @ self.Z

    def values(self, x):
        return self.design(x) @ self.coefficients


@dataclass
class GamFit:
    terms: list
    link: str
    intercept: float
    coefficients: np.ndarray
    design: np.ndarray
    y: np.ndarray
    rows: np.ndarray          # indices into the source table
    fitted: np.ndarray        # fitted mean
    deviance: float
    null_deviance: float
    deviance_explained: float
    hat_trace: float
    scale: float
    covariance: np.ndarray    # posterior covariance of all coefficients
    gcv: float
    weights: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return self.y.shape[0]

    def term(self, name):
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(f"no smooth term named {name!r}")

    @property
    def term_names(self):
        return [t.name for t in self.terms]

    @property
    def lambdas(self):
        return np.array([t.lam for t in self.terms])

    def penalty_matrix(self, lambdas=None):
        lams = self.lambdas if lambdas is None else lambdas
        return _total_penalty(self.terms, self.design.shape[1], lams)

    def linear_predictor(self, data):
        eta = np.full(len(next(iter(data.values()))) if data else 1, self.intercept)
        for t in self.terms:
            eta = eta + t.values(np.asarray(data[t.name], dtype=float))
        return eta

    def predict(self, data):
        eta = self.linear_predictor(data)
        return np.exp(eta) if self.link == "log" else eta


# --------------------------------------------------------------------------
# model matrix assembly
# --------------------------------------------------------------------------

def _constrained_term(name, x, k):
    knots = quantile_knots(x, k)
    spline = CrSpline.from_knots(knots)
    Xraw = spline.evaluate(x)
    C = Xraw.sum(axis=0)[:, None]
    Q, _ = np.linalg.qr(C, mode="complete")
    Z = Q[:, 1:]
    Xc = Xraw @ Z
    Sc = Z.T @ spline.penalty @ Z
    Sc = 0.5 * (Sc + Sc.T)
    # penalty rescaled to the norm of the block's Gram matrix, so lambda is
    # relative to the data information and the grid means the same for any n.
    # Frobenius norms are used because they do not depend on which orthonormal
    # basis of the constrained space the QR step happens to return.
    scale = np.linalg.norm(Xc.T @ Xc) / np.linalg.norm(Sc)
    return spline, Z, Xc, Sc * scale, scale


def _total_penalty(terms, p, lams):
    S = np.zeros((p, p))
    for t, lam in zip(terms, lams):
        S[t.columns, t.columns] += lam * t.penalty
    return S


def _check_rank(X, terms):
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] > 1e-10 * s[0]:
        return
    cols = [0]
    for t in terms:
        cols.extend(range(t.columns.start, t.columns.stop))
        sub = np.linalg.svd(X[:, cols], compute_uv=False)
        if sub[-1] <= 1e-10 * sub[0]:
            raise GamError(f"design is rank deficient after adding term {t.name!r}")
    raise GamError("design is rank deficient")


def model_setup(columns, y, names, k, rows=None, cache=None):
    """Build the design matrix and smooth-term shells for ``names``.

    ``columns`` maps each name to its covariate vector (already restricted to
    the fitted rows). ``cache`` (optional dict) memoises per-term bases keyed
    on the name and the row set.
    """
    terms, blocks = [], [np.ones((y.shape[0], 1))]
    start = 1
    key_rows = None if rows is None else np.asarray(rows).tobytes()
    for name in names:
        x = np.ascontiguousarray(columns[name], dtype=float)
        key = (name, k, key_rows)
        if cache is not None and key_rows is not None and key in cache:
            spline, Z, Xc, Sc, scale = cache[key]
        else:
            try:
                spline, Z, Xc, Sc, scale = _constrained_term(name, x, k)
            except InsufficientVariationError as exc:
                raise GamError(f"term {name!r}: {exc}") from None
            if cache is not None and key_rows is not None:
                cache[key] = (spline, Z, Xc, Sc, scale)
        cols = slice(start, start + k - 1)
        start += k - 1
        terms.append(SmoothTerm(name=name, k=k, spline=spline, Z=Z, penalty=Sc,
                                penalty_scale=scale, columns=cols, x=x))
        blocks.append(Xc)
    X = np.hstack(blocks)
    _check_rank(X, terms)
    return X, terms


# --------------------------------------------------------------------------
# penalised fits at fixed smoothing parameters
# --------------------------------------------------------------------------

@dataclass
class _Solution:
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    deviance: float
    A_chol: tuple
    XtWX: np.ndarray
    w: np.ndarray
    trace: float


def _pls(X, y, S, w=None, z=None):
    """Weighted penalised least squares: minimise ||sqrt(w)(z - X b)||^2 + b'Sb."""
    z = y if z is None else z
    if w is None:
        XtWX = X.T @ X
        XtWz = X.T @ z
    else:
        Xw = X * w[:, None]
        XtWX = X.T @ Xw
        XtWz = Xw.T @ z
    A = XtWX + S
    try:
        cf = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise GamError("penalised normal equations are not positive definite") from None
    beta = cho_solve(cf, XtWz)
    trace = float(np.trace(cho_solve(cf, XtWX)))
    return beta, cf, XtWX, trace


def _fit_fixed(X, y, S, link, max_iter=100, tol=1e-10):
    n = y.shape[0]
    if link == "identity":
        beta, cf, XtX, trace = _pls(X, y, S)
        eta = X @ beta
        dev = float(((y - eta) ** 2).sum())
        return _Solution(beta, eta, eta, dev, cf, XtX, np.ones(n), trace)
    # Gaussian family, log link
    mu = np.maximum(y, 0.1 * max(float(y.mean()), 1e-8))
    eta = np.log(mu)
    dev_old = math.inf
    beta = None
    for _ in range(max_iter):
        w = mu * mu
        z = eta + (y - mu) / mu
        beta_new, cf, XtWX, trace = _pls(X, y, S, w=w, z=z)
        eta_new = X @ beta_new
        pen = lambda b: float(((y - np.exp(X @ b)) ** 2).sum() + b @ S @ b)  # noqa: E731
        if beta is not None:
            step = 1.0
            while pen(beta_new) > pen(beta) + 1e-12 * abs(pen(beta)) and step > 1e-6:
                step *= 0.5
                beta_new = beta + step * (beta_new - beta)
            eta_new = X @ beta_new
        beta, eta = beta_new, np.clip(eta_new, -700, 700)
        mu = np.exp(eta)
        dev = float(((y - mu) ** 2).sum())
        if abs(dev - dev_old) <= tol * (abs(dev) + tol):
            break
        dev_old = dev
    w = mu * mu
    _, cf, XtWX, trace = _pls(X, y, S, w=w, z=eta + (y - mu) / mu)
    return _Solution(beta, eta, mu, dev, cf, XtWX, w, trace)


def _gcv(dev, n, trace):
    denom = n - trace
    if denom <= 0:
        return math.inf
    return n * dev / denom ** 2


# --------------------------------------------------------------------------
# smoothing parameter search
# --------------------------------------------------------------------------

def _scan_identity(X, y, terms, lams, j, grid, XtX):
    """GCV over ``grid`` for term ``j`` with the other lambdas held fixed.

    One Cholesky and one symmetric eigendecomposition per scan: with
    ``A0 = L L'`` and ``L^-1 S_j L^-T = U D U'`` every grid point costs O(np).
    """
    n, p = X.shape
    others = [lam if i != j else 0.0 for i, lam in enumerate(lams)]
    A0 = XtX + _total_penalty(terms, p, others)
    try:
        L = np.linalg.cholesky(A0)
    except np.linalg.LinAlgError:
        # unpenalised block may be singular; fall back to direct evaluation
        return np.array([_gcv_at(X, y, terms, _with(lams, j, g), "identity") for g in grid])
    Sj = np.zeros((p, p))
    t = terms[j]
    Sj[t.columns, t.columns] = t.penalty
    Linv_S = solve_triangular(L, Sj, lower=True)
    Bm = solve_triangular(L, Linv_S.T, lower=True)
    d, U = np.linalg.eigh(0.5 * (Bm + Bm.T))
    d = np.clip(d, 0.0, None)
    Q = solve_triangular(L, X.T, lower=True).T @ U
    c = Q.T @ y
    m = (Q * Q).sum(axis=0)
    out = np.empty(grid.shape[0])
    for i, g in enumerate(grid):
        shrink = 1.0 / (1.0 + g * d)
        fitted = Q @ (c * shrink)
        rss = float(((y - fitted) ** 2).sum())
        out[i] = _gcv(rss, n, float((m * shrink).sum()))
    return out


def _with(lams, j, value):
    out = list(lams)
    out[j] = value
    return out


def _gcv_at(X, y, terms, lams, link):
    S = _total_penalty(terms, X.shape[1], lams)
    try:
        sol = _fit_fixed(X, y, S, link)
    except GamError:
        return math.inf
    return _gcv(sol.deviance, y.shape[0], sol.trace)


def select_lambdas(X, y, terms, config):
    """Coordinate-wise GCV minimisation over the configured log grid.

    Starts every term at the largest grid value and moves a term only when
    its best grid point beats the current score by more than ``config.tol``
    relative. Scores within that tolerance of the minimum count as ties and
    resolve to the larger lambda. Returns ``(lambdas, gcv)``.
    """
    grid = config.grid
    lams = [float(grid[-1])] * len(terms)
    if not terms:
        return lams, _gcv_at(X, y, terms, lams, config.link)
    n = y.shape[0]
    floor = 1e-12 * float(((y - y.mean()) ** 2).sum()) / n
    XtX = X.T @ X
    current = _gcv_at(X, y, terms, lams, config.link)
    for _ in range(config.max_passes):
        changed = False
        for j in range(len(terms)):
            if config.link == "identity":
                scores = _scan_identity(X, y, terms, lams, j, grid, XtX)
            else:
                scores = np.array([_gcv_at(X, y, terms, _with(lams, j, g), config.link)
                                   for g in grid])
            best = float(scores.min())
            ties = np.flatnonzero(scores <= best + config.tol * abs(best) + floor)
            pick = int(ties[-1])
            if scores[pick] < current - config.tol * abs(current) - floor:
                lams[j] = float(grid[pick])
                current = float(scores[pick])
                changed = True
        if not changed:
            break
    return lams, _gcv_at(X, y, terms, lams, config.link)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def _term_test(beta_j, V_j, edf, resid_df):
    """Wald statistic on the top ``round(edf)`` eigen-directions of V_j."""
    r = int(min(max(1, round(edf)), beta_j.shape[0]))
    ev, U = np.linalg.eigh(0.5 * (V_j + V_j.T))
    order = np.argsort(ev)[::-1][:r]
    ev, U = ev[order], U[:, order]
    ev = np.where(ev > ev[0] * 1e-12, ev, math.inf) if ev[0] > 0 else np.full(r, math.inf)
    proj = U.T @ beta_j
    T = float((proj ** 2 / ev).sum())
    if resid_df <= 0:
        return r, T, math.nan
    return r, T, float(stats.f.sf(T / r, r, resid_df))


def fit_arrays(columns, y, names, config=None, lambdas=None, rows=None, cache=None):
    """Fit a GAM to in-memory arrays; see :func:`fit_gam` for the table form."""
    config = config or GamConfig()
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 10:
        raise GamError(f"need at least 10 usable rows, got {n}")
    if config.link == "log" and np.any(y < 0):
        raise GamError("log link needs a non-negative response")
    if len(set(names)) != len(names):
        raise GamError("duplicate smooth terms")
    X, terms = model_setup(columns, y, names, config.k, rows=rows, cache=cache)
    if X.shape[1] >= n:
        raise GamError(f"{X.shape[1]} coefficients for {n} rows; too few rows")
    if lambdas is None:
        lams, gcv = select_lambdas(X, y, terms, config)
    else:
        lams = [float(v) for v in (lambdas.values() if isinstance(lambdas, dict) else lambdas)]
        if isinstance(lambdas, dict):
            lams = [float(lambdas[t]) for t in names]
        if len(lams) != len(terms) or any(v < 0 for v in lams):
            raise GamError("need one non-negative lambda per term")
        gcv = None
    S = _total_penalty(terms, X.shape[1], lams)
    sol = _fit_fixed(X, y, S, config.link)
    if gcv is None:
        gcv = _gcv(sol.deviance, n, sol.trace)

    F = cho_solve(sol.A_chol, sol.XtWX)
    hat_trace = float(np.trace(F))
    resid_df = n - hat_trace
    scale = sol.deviance / resid_df if resid_df > 0 else math.nan
    Ainv = cho_solve(sol.A_chol, np.eye(X.shape[1]))
    cov = 0.5 * (Ainv + Ainv.T) * scale
    diagF = np.diag(F)
    for t, lam in zip(terms, lams):
        t.lam = lam
        t.coefficients = sol.beta[t.columns].copy()
        t.edf = float(diagF[t.columns].sum())
        t.ref_df, t.statistic, t.p_value = _term_test(
            t.coefficients, cov[t.columns, t.columns], t.edf, resid_df)
    null_dev = float(((y - y.mean()) ** 2).sum())
    dev_expl = 1.0 - sol.deviance / null_dev if null_dev > 0 else math.nan
    return GamFit(terms=terms, link=config.link, intercept=float(sol.beta[0]),
                  coefficients=sol.beta, design=X, y=y,
                  rows=np.arange(n) if rows is None else np.asarray(rows),
                  fitted=sol.mu, deviance=sol.deviance, null_deviance=null_dev,
                  deviance_explained=float(dev_expl), hat_trace=hat_trace, scale=scale,
                  covariance=cov, gcv=float(gcv), weights=sol.w)


def fit_gam(table, terms, config=None, lambdas=None, cache=None):
    """Fit ``response ~ s(term_1) + ... + s(term_m)`` on a factor table.

    Rows missing the response or any used factor are dropped. ``lambdas``
    fixes the smoothing parameters (sequence in term order or a dict);
    otherwise they are chosen by GCV.
    """
    terms = list(terms)
    for name in terms:
        if name not in table.factors:
            raise GamError(f"unknown factor {name!r}")
    rows = table.usable.copy()
    for name in terms:
        rows &= ~np.isnan(table.factors[name])
    idx = np.flatnonzero(rows)
    cols = {name: table.factors[name][idx] for name in terms}
    return fit_arrays(cols, table.response[idx], terms, config=config, lambdas=lambdas,
                      rows=idx, cache=cache)


def deviance_explained(fit):
    return fit.deviance_explained


def penalized_objective(fit, beta=None):
    """Penalised deviance ``D(beta) + beta' S_lambda beta`` at ``beta``."""
    beta = fit.coefficients if beta is None else np.asarray(beta, dtype=float)
    eta = fit.design @ beta
    mu = np.exp(eta) if fit.link == "log" else eta
    return float(((fit.y - mu) ** 2).sum() + beta @ fit.penalty_matrix() @ beta)


def penalized_gradient(fit, beta=None):
    beta = fit.coefficients if beta is None else np.asarray(beta, dtype=float)
    eta = fit.design @ beta
    if fit.link == "log":
        mu = np.exp(eta)
        g = -2.0 * fit.design.T @ ((fit.y - mu) * mu)
    else:
        g = -2.0 * fit.design.T @ (fit.y - eta)
    return g + 2.0 * fit.penalty_matrix() @ beta


@dataclass(frozen=True)
class SmoothCurve:
    term: str
    x: np.ndarray
    fit: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def smooth_curve(fit, term, grid_size=200):
    """Term effect on an even grid over the observed range, with +/- 2 SE bands."""
    t = fit.term(term)
    xg = np.linspace(t.x.min(), t.x.max(), grid_size)
    B = t.design(xg)
    f = B @ t.coefficients
    V = fit.covariance[t.columns, t.columns]
    se = np.sqrt(np.maximum((B @ V * B).sum(axis=1), 0.0))
    return SmoothCurve(term, xg, f, f - 2.0 * se, f + 2.0 * se)
