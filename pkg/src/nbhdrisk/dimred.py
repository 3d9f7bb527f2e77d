"""Covariance PCA via cyclic Jacobi diagonalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import jacobi_eigh


@dataclass(frozen=True)
class PcaModel:
    """Means, unit loading vectors (columns) and eigenvalues, largest first."""
    means: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_components(self):
        return self.eigenvalues.shape[0]


def fit_pca(matrix):
    """Eigendecompose the sample covariance (ddof=1) of ``matrix``.

    Keeps ``min(rows - 1, cols)`` components. Each loading vector is signed so
    its largest-magnitude entry is positive (first one on exact ties).
    """
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs a 2-D matrix with at least 2 rows")
    if np.isnan(X).any():
        raise ValueError("PCA input contains missing values")
    means = X.mean(axis=0)
    Xc = X - means
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if not np.any(cov):
        raise ValueError("PCA input has zero variance (rank 0)")
    w, V = jacobi_eigh(cov, tol=1e-12)
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    keep = min(X.shape[0] - 1, X.shape[1])
    w, V = np.clip(w[:keep], 0.0, None), V[:, :keep]
    for j in range(keep):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    for a in (means, V, w):
        a.setflags(write=False)
    return PcaModel(means=means, components=V, eigenvalues=w)


def project(model, matrix, n_components):
    if not 1 <= n_components <= model.n_components:
        raise ValueError(f"n_components must be in [1, {model.n_components}]")
    X = np.asarray(matrix, dtype=float)
    return (X - model.means) @ model.components[:, :n_components]


def reconstruct(model, scores):
    n = scores.shape[1]
    return scores @ model.components[:, :n].T + model.means


def variance_explained(model, n):
    if n < 1:
        raise ValueError("n must be >= 1")
    total = model.eigenvalues.sum()
    if n >= model.n_components:
        return 1.0
    return float(min(model.eigenvalues[:n].sum() / total, 1.0))
