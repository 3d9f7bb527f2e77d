import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbhdrisk.cluster import (
    FAMILIES, BicRow, DegenerateFitError, adjusted_rand_index, bic, class_profile, fit_gmm,
    n_parameters, pick_best, relabel_by_response, select_model,
)

from conftest import make_table


def blobs(sizes, centers, sd=1.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(c, sd, size=(n, len(c))) for n, c in zip(sizes, centers)])
    y = np.repeat(np.arange(len(sizes)), sizes)
    return X, y


def test_single_component_equals_sample_moments():
    X = np.random.default_rng(0).normal(size=(200, 3)) @ np.diag([1.0, 2.0, 0.5])
    f = fit_gmm(X, 1, "full", seed=1)
    np.testing.assert_allclose(f.means[0], X.mean(axis=0), atol=1e-12)
    cov = np.cov(X.T, bias=True)
    np.testing.assert_allclose(f.covariances[0], cov, atol=1e-5 * np.abs(cov).max())
    np.testing.assert_array_equal(f.responsibilities, 1.0)


def test_two_blob_means_recovered():
    X, _ = blobs([1000, 1000], [(0.0, 0.0), (8.0, 3.0)], seed=3)
    f = fit_gmm(X, 2, "full", seed=5)
    got = f.means[np.argsort(f.means[:, 0])]
    np.testing.assert_allclose(got, [[0.0, 0.0], [8.0, 3.0]], atol=0.1)
    sample = np.array([X[:1000].mean(axis=0), X[1000:].mean(axis=0)])
    np.testing.assert_allclose(got, sample, atol=1e-3)


@pytest.mark.parametrize("family", FAMILIES)
def test_objective_trace_never_decreases(family):
    X, _ = blobs([40, 30, 20], [(0, 0, 0), (3, 1, 0), (0, 4, 2)], seed=8)
    f = fit_gmm(X, 3, family, seed=2)
    tr = np.array(f.trace)
    assert np.all(np.diff(tr) >= -1e-9 * np.abs(tr[:-1]).clip(1.0))


def test_responsibilities_and_weights_are_stochastic():
    X, _ = blobs([50, 50], [(0, 0), (2, 2)], seed=1)
    f = fit_gmm(X, 2, "diagonal", seed=0)
    np.testing.assert_allclose(f.responsibilities.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(f.weights > 0)
    assert f.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_parameter_counts():
    assert n_parameters(1, 2, "spherical") == 3
    assert n_parameters(3, 2, "full") == 3 * 2 + 2 + 3 * 3
    assert n_parameters(2, 4, "diagonal") == 8 + 1 + 8


def test_bic_hand_formula():
    X = np.random.default_rng(4).normal(size=(100, 2))
    f = fit_gmm(X, 1, "spherical", seed=0)
    # hand calculation: isotropic Gaussian at the sample mean and pooled variance
    mu = X.mean(axis=0)
    s2 = ((X - mu) ** 2).sum() / 200
    loglik = -100 * math.log(2 * math.pi * s2) - ((X - mu) ** 2).sum() / (2 * s2)
    assert f.log_likelihood == pytest.approx(loglik, abs=1e-4)
    assert bic(f, 100) == pytest.approx(2 * loglik - 3 * math.log(100), abs=1e-3)


def test_fewer_params_wins_at_equal_likelihood():
    rows = [BicRow(2, "full", -100.0 - 1e-12, -50.0, 11), BicRow(2, "spherical", -100.0, -50.0, 7)]
    assert pick_best(rows) == 1
    rows = [BicRow(3, "spherical", -90.0, -40.0, 11), BicRow(2, "spherical", -90.0 + 5e-10, -40.0, 7)]
    assert pick_best(rows) == 1
    assert pick_best([BicRow(1, "full", -5.0, 0, 2), BicRow(2, "full", -4.0, 0, 9)]) == 1


def test_all_failed_candidates_raise():
    with pytest.raises(DegenerateFitError):
        pick_best([BicRow(1, "full", math.nan, math.nan, 3, error="boom")])


def test_planted_three_clusters_peak_at_three():
    X, y = blobs([61, 11, 58], [(0, 0), (6, 6), (12, -6)], seed=2)
    res = select_model(X, k_range=range(1, 7), seed=3)
    assert res.fit.K == 3
    assert adjusted_rand_index(res.labels, y) >= 0.9
    best_per_k = {}
    for r in res.bic_table:
        if not r.error:
            best_per_k[r.K] = max(best_per_k.get(r.K, -math.inf), r.bic)
    assert max(best_per_k, key=best_per_k.get) == 3


def test_single_blob_selects_one():
    X = np.random.default_rng(6).normal(size=(120, 2))
    assert select_model(X, k_range=range(1, 5), seed=1).fit.K == 1


def test_select_model_is_own_table_argmax():
    X, _ = blobs([40, 40], [(0, 0), (5, 0)], seed=9)
    res = select_model(X, k_range=range(1, 4), seed=0)
    ok = [r for r in res.bic_table if not r.error]
    assert res.bic == max(r.bic for r in ok)
    assert len(res.bic_table) == 3 * len(FAMILIES)


def test_deterministic_given_seed():
    X, _ = blobs([30, 30], [(0, 0), (4, 1)], seed=0)
    a = fit_gmm(X, 2, "full", seed=17)
    b = fit_gmm(X, 2, "full", seed=17)
    assert a.log_likelihood == b.log_likelihood
    np.testing.assert_array_equal(a.labels, b.labels)


def test_errors():
    X = np.random.default_rng(0).normal(size=(5, 2))
    with pytest.raises(ValueError):
        fit_gmm(X, 6)
    with pytest.raises(DegenerateFitError):
        fit_gmm(np.ones((10, 2)), 2)
    with pytest.raises(ValueError):
        fit_gmm(X, 1, "tied")


def test_permuting_rows_keeps_partition_and_bic():
    X, _ = blobs([50, 40], [(0, 0), (7, 2)], seed=4)
    perm = np.random.default_rng(1).permutation(X.shape[0])
    a = fit_gmm(X, 2, "full", seed=3)
    b = fit_gmm(X[perm], 2, "full", seed=3)
    assert bic(a, 90) == pytest.approx(bic(b, 90), abs=1e-6)
    assert adjusted_rand_index(a.labels[perm], b.labels) == 1.0


def test_ari_values():
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    # hand-computed contingency example: ARI = 0.24242...
    a = [0, 0, 0, 1, 1, 1]
    b = [0, 0, 1, 1, 2, 2]
    assert adjusted_rand_index(a, b) == pytest.approx(0.24242424242424243, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=4, max_size=40),
       st.permutations([0, 1, 2, 3]))
def test_ari_label_renaming_invariant(labels, perm):
    labels = np.array(labels)
    renamed = np.array(perm)[labels]
    assert adjusted_rand_index(labels, renamed) == pytest.approx(1.0)


def test_relabel_by_response():
    labels = np.array([0, 0, 1, 1, 2, 2])
    resp = np.array([9.0, 8.0, 1.0, 2.0, 5.0, 4.0])
    np.testing.assert_array_equal(relabel_by_response(labels, resp), [2, 2, 0, 0, 1, 1])


def test_profiles():
    rng = np.random.default_rng(0)
    income = np.r_[rng.normal(30, 2, 20), rng.normal(90, 2, 20)]
    t = make_table({"income": income}, np.r_[np.full(20, 40.0), np.full(20, 10.0)])
    labels = np.repeat([0, 1], 20)
    prof = class_profile(labels, t, n_classes=3)
    assert prof[0].medians["income"] < 40 < 80 < prof[1].medians["income"]
    assert prof[0].means["response"] > prof[1].means["response"]
    assert prof[2].undefined and prof[2].size == 0
    whole = class_profile(np.zeros(40, dtype=int), t)[0]
    assert whole.means["income"] == pytest.approx(income.mean())
    assert whole.medians["response"] == pytest.approx(25.0)
