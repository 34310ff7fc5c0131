"""Time the numba kernels against the pure-numpy fallbacks and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from factornet import kernels
from factornet.tensor import SVD_MAX_SWEEPS, SVD_TOL, Rng


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_matmul(shapes, repeat):
    rows = []
    for m, k, n in shapes:
        rng = Rng(0, 1)
        a, b = rng.normal((m, k)), rng.normal((k, n))
        kernels.matmul_numba(a, b)  # compile
        t_nb = best_time(lambda: kernels.matmul_numba(a, b), repeat)
        t_np = best_time(lambda: kernels.matmul_numpy(a, b), repeat)
        same = np.array_equal(kernels.matmul_numba(a, b), kernels.matmul_numpy(a, b))
        rows.append((f"matmul {m}x{k} @ {k}x{n}", t_nb, t_np, same))
    return rows


def bench_jacobi(shapes, repeat):
    rows = []
    for m, n in shapes:
        a = Rng(0, 2).normal((m, n))
        sched = kernels.round_robin_schedule(n)
        floor = 1e-30 * float(np.sum(a * a))

        def run(fn):
            x = np.array(a.T, order="C", copy=True)
            v = np.eye(n)
            fn(x, v, sched, SVD_TOL, floor, SVD_MAX_SWEEPS)
            return x

        run(kernels.jacobi_numba)
        t_nb = best_time(lambda: run(kernels.jacobi_numba), repeat)
        t_np = best_time(lambda: run(kernels.jacobi_numpy), repeat)
        s_nb = np.sort(np.linalg.norm(run(kernels.jacobi_numba), axis=1))
        s_np = np.sort(np.linalg.norm(run(kernels.jacobi_numpy), axis=1))
        agree = float(np.max(np.abs(s_nb - s_np)) / s_nb[-1])
        rows.append((f"jacobi svd {m}x{n}", t_nb, t_np, agree < 1e-12))
    return rows


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = bench_matmul([(64, 64, 64), (256, 144, 32), (1024, 48, 96)], args.repeat)
    rows += bench_jacobi([(20, 10), (60, 40), (120, 100)], args.repeat)
    print(f"{'kernel':32s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}  agree")
    for name, t_nb, t_np, ok in rows:
        print(f"{name:32s} {t_nb:10.5f} {t_np:10.5f} {t_np / t_nb:8.2f}  {ok}")


if __name__ == "__main__":
    main()
