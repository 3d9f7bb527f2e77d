"""Time each hot kernel in its numba-compiled loop form against its numpy twin.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--scale 1]

The loop forms are compiled on first call; that call is timed separately as
"compile". With ``NBHDRISK_DISABLE_NUMBA=1`` the loop forms run as plain
Python, which is only useful for checking that the fallback works.
"""
import argparse
import statistics
import time

import numpy as np

from nbhdrisk import backend, kernels
from nbhdrisk.plume import WindRose
from nbhdrisk.splines import CrSpline


def cases(scale):
    rng = np.random.default_rng(0)

    n_src, n_tgt = 60 * scale, 2000 * scale
    rose = WindRose.uniform(16).arrays()
    plume_args = (43.7 + rng.uniform(-0.1, 0.1, n_src), -79.4 + rng.uniform(-0.1, 0.1, n_src),
                  rng.uniform(0, 5, n_src), 43.7 + rng.uniform(-0.1, 0.1, n_tgt),
                  -79.4 + rng.uniform(-0.1, 0.1, n_tgt), 2.5, 1.0, *rose)

    knots = np.sort(rng.uniform(0, 1, 10))
    spline = CrSpline.from_knots(knots)
    basis_args = (rng.uniform(-0.1, 1.1, 20000 * scale), knots, spline.fplus)

    m = rng.normal(size=(24, 24))
    jacobi_args = (m + m.T, 1e-12, 100)

    d = 12
    c = rng.normal(size=(d, d))
    L = np.linalg.cholesky(c @ c.T + d * np.eye(d))
    maha_args = (rng.normal(size=(20000 * scale, d)), rng.normal(size=d), L)

    return [
        ("plume sums", kernels.plume_sums_loop, kernels.plume_sums_numpy, plume_args),
        ("cr basis rows", kernels.cr_basis_loop, kernels.cr_basis_numpy, basis_args),
        ("jacobi eigh", kernels.jacobi_eigh_loop, kernels.jacobi_eigh_numpy, jacobi_args),
        ("mahalanobis", kernels.mahalanobis_sq_loop, kernels.mahalanobis_sq_numpy, maha_args),
    ]


def timed(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _copy(args):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--scale", type=int, default=1, help="multiply problem sizes")
    args = ap.parse_args(argv)

    print(f"backend: {backend()}")
    print(f"{'kernel':<15}{'compile s':>11}{'loop s':>11}{'numpy s':>11}{'numpy/loop':>12}")
    for name, loop, vec, kargs in cases(args.scale):
        t0 = time.perf_counter()
        loop(*_copy(kargs))
        first = time.perf_counter() - t0
        t_loop = timed(loop, _copy(kargs), args.repeat)
        t_vec = timed(vec, _copy(kargs), args.repeat)
        print(f"{name:<15}{first:>11.4f}{t_loop:>11.5f}{t_vec:>11.5f}{t_vec / t_loop:>12.2f}")


if __name__ == "__main__":
    main()
