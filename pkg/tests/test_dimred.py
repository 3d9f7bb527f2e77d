import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nbhdrisk.dimred import fit_pca, project, reconstruct, variance_explained


def low_rank_data(n=130, p=12, rank=2, noise=0.05, seed=0):
    """Two latent factors with strong loadings plus small isotropic noise."""
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(n, rank)) * np.array([3.0, 2.0])[:rank]
    loadings = np.linalg.qr(rng.normal(size=(p, rank)))[0].T
    return latent @ loadings + noise * rng.normal(size=(n, p))


def char_poly_eigs(c):
    """Eigenvalues of a symmetric 2x2 or 3x3 matrix from its characteristic polynomial."""
    if c.shape == (2, 2):
        tr, det = np.trace(c), np.linalg.det(c)
        disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
        return np.sort([tr / 2 - disc, tr / 2 + disc])
    # trigonometric solution of the depressed cubic for real symmetric matrices
    q = np.trace(c) / 3
    p1 = c[0, 1] ** 2 + c[0, 2] ** 2 + c[1, 2] ** 2
    p2 = ((c[0, 0] - q) ** 2 + (c[1, 1] - q) ** 2 + (c[2, 2] - q) ** 2) + 2 * p1
    p = math.sqrt(p2 / 6)
    b = (c - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(b) / 2, -1.0, 1.0)
    phi = math.acos(r) / 3
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.sort([e3, 3 * q - e1 - e3, e1])


def test_diagonal_points():
    t = np.linspace(-2, 2, 9)
    m = fit_pca(np.column_stack([t, t]))
    np.testing.assert_allclose(m.components[:, 0], [1 / math.sqrt(2)] * 2, atol=1e-12)
    assert abs(m.eigenvalues[1]) < 1e-12
    assert m.eigenvalues[0] == pytest.approx(2 * t.var(ddof=1), rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("d", [2, 3])
def test_eigenvalues_match_characteristic_polynomial(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, d)) @ rng.normal(size=(d, d))
    m = fit_pca(X)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    np.testing.assert_allclose(np.sort(m.eigenvalues), char_poly_eigs(cov), rtol=0,
                               atol=1e-10 * max(1.0, np.abs(cov).max()))


def test_gram_and_reconstruction():
    X = low_rank_data()
    m = fit_pca(X)
    G = m.components.T @ m.components
    assert np.abs(G - np.eye(G.shape[0])).max() < 1e-10
    scores = project(m, X, m.n_components)
    assert np.abs(reconstruct(m, scores) - X).max() < 1e-10


def test_low_rank_variance_explained():
    m = fit_pca(low_rank_data())
    assert variance_explained(m, 2) >= 0.95
    assert variance_explained(m, m.n_components) == 1.0


def test_isotropic_first_component_share():
    rng = np.random.default_rng(1)
    m = fit_pca(rng.normal(size=(20000, 4)))
    assert variance_explained(m, 1) == pytest.approx(0.25, abs=0.02)
    np.testing.assert_allclose(m.eigenvalues, 1.0, atol=0.05)


def test_sign_convention_is_deterministic():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 5))
    m1, m2 = fit_pca(X), fit_pca(X.copy())
    np.testing.assert_array_equal(m1.components, m2.components)
    for j in range(m1.n_components):
        col = m1.components[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_projecting_means_gives_zero():
    X = low_rank_data(seed=3)
    m = fit_pca(X)
    assert np.abs(project(m, m.means[None, :], 3)).max() < 1e-12


def test_errors():
    with pytest.raises(ValueError, match="zero variance"):
        fit_pca(np.tile([1.0, 2.0, 3.0], (5, 1)))
    m = fit_pca(low_rank_data(n=10, p=4))
    with pytest.raises(ValueError):
        project(m, np.zeros((1, 4)), 5)
    with pytest.raises(ValueError):
        project(m, np.zeros((1, 4)), 0)


def test_component_count_capped_by_rows():
    m = fit_pca(np.random.default_rng(0).normal(size=(4, 7)))
    assert m.n_components == 3


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 4), elements=st.floats(-100, 100)))
def test_variance_explained_non_decreasing(X):
    if np.ptp(X, axis=0).max() < 1e-6:
        return
    m = fit_pca(X)
    vals = [variance_explained(m, i) for i in range(1, m.n_components + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0
    G = m.components.T @ m.components
    assert np.abs(G - np.eye(G.shape[0])).max() < 1e-10
