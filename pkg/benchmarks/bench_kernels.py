"""Benchmark the numba kernel lane against the pure-numpy fallback.

Runs the lane-switched kernels on workload shapes matching the replication
harness (one- and two-factor designs) and prints a timing table, followed by
timings of the shared chunk-compensated reductions.  Both lane
implementations are imported explicitly, so the FACTORGOF_NO_NUMBA flag is
not needed here; it exists for forcing the fallback at package level.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from factorgof import kernels


def _time(fn, *args, repeat=5):
    fn(*args)  # warm-up (and JIT compile for the numba lane)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    shapes = (("one-factor", 10_000, 10, 31), ("two-factor", 10_000, 20, 361))

    print(f"active backend: {kernels.backend()}  (workers: {kernels.worker_count()})")
    print()
    header = f"{'lane-switched kernel':52s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, n, m, Q in shapes:
        Y = np.ascontiguousarray(rng.normal(size=(n, m)))
        mu = np.ascontiguousarray(rng.normal(size=(Q, m)))
        theta = rng.uniform(0.3, 1.0, m)
        A = rng.normal(size=(m, m))
        chol = np.linalg.cholesky(A @ A.T + m * np.eye(m))
        nu = rng.normal(size=m)
        for name, np_fn, nb_fn, fargs in (
            ("cond_loglik_grid", kernels.cond_loglik_grid_numpy,
             kernels.cond_loglik_grid_numba, (Y, mu, theta)),
            ("mvn_loglik_rows", kernels.mvn_loglik_rows_numpy,
             kernels.mvn_loglik_rows_numba, (Y, nu, chol)),
        ):
            row = f"{name} {label} ({n}x{m}" + (f" @ {Q} pts)" if "grid" in name else ")")
            t_np = _time(np_fn, *fargs, repeat=args.repeat)
            if kernels.HAS_NUMBA:
                t_nb = _time(nb_fn, *fargs, repeat=args.repeat)
                print(f"{row:52s} {t_np * 1e3:8.2f}ms {t_nb * 1e3:8.2f}ms {t_np / t_nb:7.2f}x")
            else:
                print(f"{row:52s} {t_np * 1e3:8.2f}ms {'n/a':>10s} {'n/a':>8s}")

    print()
    print("shared chunk-compensated reductions (both lanes):")
    for label, n, m, Q in shapes:
        H = np.ascontiguousarray(rng.normal(size=(n, Q)))
        S = np.ascontiguousarray(rng.normal(size=(n, 3 * m)))
        for name, fn, fargs in (
            (f"colmean ({n}x{Q})", kernels.colmean, (H,)),
            (f"crossprod_mean ({n}x{Q} x {n}x{3 * m})", kernels.crossprod_mean, (H, S)),
            (f"covariance ({n}x{Q})", kernels.covariance, (H,)),
        ):
            t = _time(fn, *fargs, repeat=args.repeat)
            print(f"  {label:12s} {name:42s} {t * 1e3:8.2f}ms")
    if kernels.HAS_NUMBA:
        H = np.ascontiguousarray(rng.normal(size=(10_000, 361)))
        t_ref = _time(kernels.colmean_neumaier, H, repeat=args.repeat)
        t_prod = _time(kernels.colmean, H, repeat=args.repeat)
        print(f"\ncolmean accuracy reference (Neumaier, 10000x361): "
              f"{t_ref * 1e3:.2f}ms vs production {t_prod * 1e3:.2f}ms")


if __name__ == "__main__":
    main()
