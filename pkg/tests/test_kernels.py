import os
import subprocess
import sys

import numpy as np
import pytest

from nbhdrisk import kernels
from nbhdrisk._accel import HAVE_NUMBA, backend
from nbhdrisk.plume import WindRose
from nbhdrisk.splines import CrSpline


def test_backend_name():
    assert backend() == ("numba" if HAVE_NUMBA else "numpy")


def test_env_flag_forces_numpy():
    env = dict(os.environ, NBHDRISK_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import nbhdrisk; print(nbhdrisk.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_plume_parity():
    rng = np.random.default_rng(0)
    s_lat, s_lon = 43.7 + rng.uniform(-0.1, 0.1, 9), -79.4 + rng.uniform(-0.1, 0.1, 9)
    tep = rng.uniform(0, 4, 9)
    t_lat, t_lon = 43.7 + rng.uniform(-0.1, 0.1, 40), -79.4 + rng.uniform(-0.1, 0.1, 40)
    t_lat[0], t_lon[0] = s_lat[0], s_lon[0]
    sec = WindRose(((315.0, 45.0, 0.3), (45.0, 180.0, 0.3), (180.0, 315.0, 0.4))).arrays()
    a = kernels.plume_sums_loop(s_lat, s_lon, tep, t_lat, t_lon, 2.5, 1.5, *sec)
    b = kernels.plume_sums_numpy(s_lat, s_lon, tep, t_lat, t_lon, 2.5, 1.5, *sec)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=0)


def test_cr_basis_parity():
    rng = np.random.default_rng(1)
    knots = np.sort(rng.uniform(0, 1, 10))
    sp = CrSpline.from_knots(knots)
    x = np.r_[rng.uniform(-0.5, 1.5, 200), knots]
    a = kernels.cr_basis_loop(x, knots, sp.fplus)
    b = kernels.cr_basis_numpy(x, knots, sp.fplus)
    np.testing.assert_allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_jacobi_parity_and_accuracy(n):
    rng = np.random.default_rng(n)
    m = rng.normal(size=(n, n))
    a = m + m.T
    for impl in (kernels.jacobi_eigh_loop, kernels.jacobi_eigh_numpy):
        w, v, sweeps = impl(a.copy(), 1e-12, 100)
        assert sweeps >= 0
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)
        np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-10)


def test_jacobi_zero_matrix_and_nonconvergence():
    w, v = kernels.jacobi_eigh(np.zeros((3, 3)))
    np.testing.assert_array_equal(w, 0.0)
    a = np.random.default_rng(0).normal(size=(8, 8))
    with pytest.raises(RuntimeError):
        kernels.jacobi_eigh(a + a.T, tol=0.0, max_sweeps=1)


def test_mahalanobis_parity():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(4, 4))
    L = np.linalg.cholesky(m @ m.T + 4 * np.eye(4))
    X = rng.normal(size=(100, 4))
    mean = rng.normal(size=4)
    a = kernels.mahalanobis_sq_loop(X, mean, L)
    b = kernels.mahalanobis_sq_numpy(X, mean, L)
    direct = np.einsum("ij,jk,ik->i", X - mean, np.linalg.inv(L @ L.T), X - mean)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a, direct, rtol=1e-10)


def test_haversine_known_distance():
    # one degree of latitude on the mean-radius sphere
    d = kernels.haversine_km(0.0, 0.0, 1.0, 0.0)
    assert d == pytest.approx(6371.0088 * np.pi / 180, rel=1e-12)
    assert kernels.initial_bearing_deg(0.0, 0.0, 1.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert kernels.initial_bearing_deg(0.0, 0.0, 0.0, 1.0) == pytest.approx(90.0)


def test_benchmark_script_runs(capsys):
    import runpy
    bench = runpy.run_path(str(__import__("pathlib").Path(__file__).parents[1]
                               / "benchmarks" / "bench_kernels.py"))
    bench["main"](["--repeat", "1"])
    out = capsys.readouterr().out
    for name in ("plume sums", "cr basis rows", "jacobi eigh", "mahalanobis"):
        assert name in out
