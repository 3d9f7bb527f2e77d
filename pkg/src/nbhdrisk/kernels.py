"""Hot numeric loops, each with a numba kernel and a pure-numpy twin.

The public names (``plume_sums``, ``cr_basis_rows``, ``jacobi_eigh``,
``mahalanobis_sq``) dispatch on :data:`nbhdrisk._accel.HAVE_NUMBA`. The
``*_loop`` functions are the compiled kernels; the ``*_numpy`` functions are
the vectorised fallbacks. Both are importable so tests and the benchmark can
compare them directly.
"""
import math

import numpy as np
from scipy.linalg import solve_triangular

from ._accel import HAVE_NUMBA, njit

EARTH_RADIUS_KM = 6371.0088


# --------------------------------------------------------------------------
# plume: sum over facilities of TEP * gaussian(distance) * wind weight
# --------------------------------------------------------------------------

@njit(cache=True)
def _sector_weight(bearing, sec_start, sec_end, sec_weight):
    for i in range(sec_start.shape[0]):
        a = sec_start[i]
        b = sec_end[i]
        if a < b:
            if a <= bearing < b:
                return sec_weight[i]
        elif bearing >= a or bearing < b:
            return sec_weight[i]
    return 0.0


@njit(cache=True)
def plume_sums_loop(src_lat, src_lon, tep, tgt_lat, tgt_lon, mu, sigma,
                    sec_start, sec_end, sec_weight):
    n_t = tgt_lat.shape[0]
    n_s = src_lat.shape[0]
    out = np.zeros(n_t)
    norm = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    deg = math.pi / 180.0
    for t in range(n_t):
        phi2 = tgt_lat[t] * deg
        lam2 = tgt_lon[t] * deg
        acc = 0.0
        for s in range(n_s):
            phi1 = src_lat[s] * deg
            lam1 = src_lon[s] * deg
            dphi = phi2 - phi1
            dlam = lam2 - lam1
            h = (math.sin(0.5 * dphi) ** 2
                 + math.cos(phi1) * math.cos(phi2) * math.sin(0.5 * dlam) ** 2)
            if h > 1.0:
                h = 1.0
            d = 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))
            z = (d - mu) / sigma
            dens = norm * math.exp(-0.5 * z * z)
            if d == 0.0:
                w = 1.0
            else:
                y = math.sin(dlam) * math.cos(phi2)
                x = (math.cos(phi1) * math.sin(phi2)
                     - math.sin(phi1) * math.cos(phi2) * math.cos(dlam))
                brg = math.atan2(y, x) / deg
                brg = brg % 360.0
                if brg >= 360.0:
                    brg = 0.0
                w = _sector_weight(brg, sec_start, sec_end, sec_weight)
            acc += tep[s] * dens * w
        out[t] = acc
    return out


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; broadcasts over array arguments."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2) - np.radians(lon1)
    h = np.sin(0.5 * dphi) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(0.5 * dlam) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def initial_bearing_deg(lat1, lon1, lat2, lon2):
    """Initial great-circle bearing from point 1 to point 2, in [0, 360)."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(lon2) - np.radians(lon1)
    y = np.sin(dlam) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dlam)
    brg = np.degrees(np.arctan2(y, x)) % 360.0
    return np.where(brg >= 360.0, 0.0, brg)


def sector_lookup(bearing, sec_start, sec_end, sec_weight):
    bearing = np.asarray(bearing, dtype=float)
    out = np.zeros(bearing.shape)
    for a, b, w in zip(sec_start, sec_end, sec_weight):
        if a < b:
            hit = (bearing >= a) & (bearing < b)
        else:
            hit = (bearing >= a) | (bearing < b)
        out = np.where(hit, w, out)
    return out


def plume_sums_numpy(src_lat, src_lon, tep, tgt_lat, tgt_lon, mu, sigma,
                     sec_start, sec_end, sec_weight):
    if src_lat.shape[0] == 0:
        return np.zeros(tgt_lat.shape[0])
    s_lat, t_lat = src_lat[None, :], tgt_lat[:, None]
    s_lon, t_lon = src_lon[None, :], tgt_lon[:, None]
    d = haversine_km(s_lat, s_lon, t_lat, t_lon)
    dens = np.exp(-0.5 * ((d - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))
    w = sector_lookup(initial_bearing_deg(s_lat, s_lon, t_lat, t_lon),
                      sec_start, sec_end, sec_weight)
    w = np.where(d == 0.0, 1.0, w)
    return (tep[None, :] * dens * w).sum(axis=1)


# --------------------------------------------------------------------------
# cubic regression spline basis rows
# --------------------------------------------------------------------------

@njit(cache=True)
def cr_basis_loop(x, knots, fplus):
    n = x.shape[0]
    k = knots.shape[0]
    out = np.zeros((n, k))
    for i in range(n):
        xi = x[i]
        if xi < knots[0]:
            h = knots[1] - knots[0]
            dx = xi - knots[0]
            # linear extrapolation: f(x0) + dx * f'(x0)
            out[i, 0] += 1.0 - dx / h
            out[i, 1] += dx / h
            for c in range(k):
                out[i, c] += dx * (-h / 3.0 * fplus[0, c] - h / 6.0 * fplus[1, c])
            continue
        if xi > knots[k - 1]:
            h = knots[k - 1] - knots[k - 2]
            dx = xi - knots[k - 1]
            out[i, k - 1] += 1.0 + dx / h
            out[i, k - 2] += -dx / h
            for c in range(k):
                out[i, c] += dx * (h / 6.0 * fplus[k - 2, c] + h / 3.0 * fplus[k - 1, c])
            continue
        lo = 0
        hi = k - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if knots[mid] <= xi:
                lo = mid
            else:
                hi = mid
        j = lo
        h = knots[j + 1] - knots[j]
        am = (knots[j + 1] - xi) / h
        ap = (xi - knots[j]) / h
        cm = ((knots[j + 1] - xi) ** 3 / h - h * (knots[j + 1] - xi)) / 6.0
        cp = ((xi - knots[j]) ** 3 / h - h * (xi - knots[j])) / 6.0
        out[i, j] += am
        out[i, j + 1] += ap
        for c in range(k):
            out[i, c] += cm * fplus[j, c] + cp * fplus[j + 1, c]
    return out


def cr_basis_numpy(x, knots, fplus):
    k = knots.shape[0]
    n = x.shape[0]
    out = np.zeros((n, k))
    rows = np.arange(n)
    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, k - 2)
    h = knots[j + 1] - knots[j]
    am = (knots[j + 1] - x) / h
    ap = (x - knots[j]) / h
    cm = ((knots[j + 1] - x) ** 3 / h - h * (knots[j + 1] - x)) / 6.0
    cp = ((x - knots[j]) ** 3 / h - h * (x - knots[j])) / 6.0
    inside = (x >= knots[0]) & (x <= knots[-1])
    np.add.at(out, (rows[inside], j[inside]), am[inside])
    np.add.at(out, (rows[inside], j[inside] + 1), ap[inside])
    out[inside] += cm[inside, None] * fplus[j[inside]] + cp[inside, None] * fplus[j[inside] + 1]

    left = x < knots[0]
    if left.any():
        h0 = knots[1] - knots[0]
        dx = x[left] - knots[0]
        out[left, 0] += 1.0 - dx / h0
        out[left, 1] += dx / h0
        out[left] += dx[:, None] * (-h0 / 3.0 * fplus[0] - h0 / 6.0 * fplus[1])
    right = x > knots[-1]
    if right.any():
        h1 = knots[-1] - knots[-2]
        dx = x[right] - knots[-1]
        out[right, k - 1] += 1.0 + dx / h1
        out[right, k - 2] += -dx / h1
        out[right] += dx[:, None] * (h1 / 6.0 * fplus[k - 2] + h1 / 3.0 * fplus[k - 1])
    return out


# --------------------------------------------------------------------------
# cyclic Jacobi eigendecomposition of a symmetric matrix
# --------------------------------------------------------------------------

@njit(cache=True)
def jacobi_eigh_loop(a, tol, max_sweeps):
    n = a.shape[0]
    A = a.copy()
    V = np.eye(n)
    fro = math.sqrt((A * A).sum())
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(n):
                if p != q:
                    off += A[p, q] * A[p, q]
        if math.sqrt(off) <= tol * fro:
            return np.diag(A).copy(), V, sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                # hypot keeps 1 + tau^2 from overflowing when apq is tiny
                if tau >= 0.0:
                    t = 1.0 / (tau + math.hypot(1.0, tau))
                else:
                    t = -1.0 / (-tau + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                for r in range(n):
                    arp = A[r, p]
                    arq = A[r, q]
                    A[r, p] = c * arp - s * arq
                    A[r, q] = s * arp + c * arq
                for r in range(n):
                    apr = A[p, r]
                    aqr = A[q, r]
                    A[p, r] = c * apr - s * aqr
                    A[q, r] = s * apr + c * aqr
                for r in range(n):
                    vrp = V[r, p]
                    vrq = V[r, q]
                    V[r, p] = c * vrp - s * vrq
                    V[r, q] = s * vrp + c * vrq
    return np.diag(A).copy(), V, -1


def jacobi_eigh_numpy(a, tol, max_sweeps):
    n = a.shape[0]
    A = np.array(a, dtype=float, copy=True)
    V = np.eye(n)
    fro = np.linalg.norm(A)
    off_mask = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps):
        if np.sqrt((A[off_mask] ** 2).sum()) <= tol * fro:
            return np.diag(A).copy(), V, sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * rp - s * rq, s * rp + c * rq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(A).copy(), V, -1


# --------------------------------------------------------------------------
# squared Mahalanobis distances given a lower Cholesky factor
# --------------------------------------------------------------------------

@njit(cache=True)
def mahalanobis_sq_loop(X, mean, L):
    n, d = X.shape
    out = np.empty(n)
    z = np.empty(d)
    for i in range(n):
        acc = 0.0
        for r in range(d):
            v = X[i, r] - mean[r]
            for c in range(r):
                v -= L[r, c] * z[c]
            z[r] = v / L[r, r]
            acc += z[r] * z[r]
        out[i] = acc
    return out


def mahalanobis_sq_numpy(X, mean, L):
    z = solve_triangular(L, (X - mean).T, lower=True)
    return (z * z).sum(axis=0)


if HAVE_NUMBA:
    plume_sums = plume_sums_loop
    cr_basis_rows = cr_basis_loop
    _jacobi = jacobi_eigh_loop
    mahalanobis_sq = mahalanobis_sq_loop
else:
    plume_sums = plume_sums_numpy
    cr_basis_rows = cr_basis_numpy
    _jacobi = jacobi_eigh_numpy
    mahalanobis_sq = mahalanobis_sq_numpy


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigen-decompose symmetric ``a`` by cyclic Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm drops below
    ``tol * ||a||_F``. Returns ``(eigenvalues, eigenvectors)`` in the order the
    rotations leave them (unsorted); raises ``RuntimeError`` if ``max_sweeps``
    is exhausted.
    """
    a = np.ascontiguousarray(a, dtype=float)
    w, v, sweeps = _jacobi(a, float(tol), int(max_sweeps))
    if sweeps < 0:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    return w, v
