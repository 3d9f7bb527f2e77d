"""Cubic regression spline basis with knot-value (cardinal) parameterisation.

Coefficients are the spline's values at the knots; second derivatives at the
knots follow from them linearly (natural ends, zero curvature at the first
and last knot). The penalty is the integrated squared second derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import cr_basis_rows


class InsufficientVariationError(ValueError):
    pass


def quantile_knots(x, k):
    x = np.asarray(x, dtype=float)
    u = np.unique(x[~np.isnan(x)])
    if u.size < k:
        raise InsufficientVariationError(
            f"need at least {k} distinct values for a {k}-knot spline, got {u.size}")
    return np.quantile(u, np.linspace(0.0, 1.0, k))


def cr_matrices(knots):
    """Return ``(fplus, S)``: knot second derivatives map and penalty."""
    knots = np.asarray(knots, dtype=float)
    k = knots.size
    if k < 3:
        raise ValueError("a cubic regression spline needs k >= 3 knots")
    h = np.diff(knots)
    if np.any(h <= 0):
        raise ValueError("knots must be strictly increasing")
    D = np.zeros((k - 2, k))
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    F = np.linalg.solve(B, D)
    fplus = np.vstack([np.zeros(k), F, np.zeros(k)])
    S = D.T @ F
    return fplus, 0.5 * (S + S.T)


@dataclass(frozen=True)
class CrSpline:
    knots: np.ndarray
    fplus: np.ndarray
    penalty: np.ndarray

    @classmethod
    def from_knots(cls, knots):
        knots = np.asarray(knots, dtype=float)
        fplus, S = cr_matrices(knots)
        return cls(knots, fplus, S)

    @property
    def k(self):
        return self.knots.size

    def evaluate(self, x):
        """Basis matrix, one row per ``x``; linear beyond the end knots."""
        x = np.ascontiguousarray(x, dtype=float)
        return cr_basis_rows(x, self.knots, self.fplus)

    def second_derivative(self, x):
        """Rows mapping coefficients to f''(x) (piecewise linear in x)."""
        x = np.asarray(x, dtype=float)
        kn = self.knots
        j = np.clip(np.searchsorted(kn, x, side="right") - 1, 0, kn.size - 2)
        h = kn[j + 1] - kn[j]
        wl = (kn[j + 1] - x) / h
        wr = (x - kn[j]) / h
        out = wl[:, None] * self.fplus[j] + wr[:, None] * self.fplus[j + 1]
        outside = (x < kn[0]) | (x > kn[-1])
        out[outside] = 0.0
        return out


def build_basis(x, k):
    """Cubic regression spline on quantile knots of ``x``.

    Returns ``(basis, penalty, knots)`` with ``basis`` of shape ``(len(x), k)``.
    """
    knots = quantile_knots(x, k)
    spline = CrSpline.from_knots(knots)
    return spline.evaluate(np.asarray(x, dtype=float)), spline.penalty, knots
