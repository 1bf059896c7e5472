"""Time the numba-compiled kernels against their numpy twins and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Compilation happens in a warm-up call and is excluded from the timings.
"""

import argparse
import time

import numpy as np

from omar import kernels as k


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x, float) - np.asarray(y, float)))) for x, y in zip(a, b))


def cases(rng):
    p = rng.uniform(0.05, 0.95, 30)
    deg = rng.integers(1, 31, 400)
    w = rng.random((400, 31))
    grid = np.linspace(0.0, 1.0, 1001)
    coef = rng.standard_normal((400, 31))
    f = rng.uniform(-0.5, 1.5, 400)
    pos, neg = np.abs(coef), np.abs(rng.standard_normal((400, 31)))
    sig0, sig1 = np.full(400, 0.2), np.full(400, 3.0)
    train = rng.standard_normal((3000, 6))
    y = rng.random(3000)
    query = rng.standard_normal((1500, 6))
    n = 250
    x = rng.standard_normal((n, 5))
    K = np.exp(-((x[:, None, :] - x[None, :, :]) ** 2).sum(-1) / 4.0)
    p2, s0, s1 = pos[:n], sig0[:n], sig1[:n]
    g = rng.uniform(0.0, 1.0, n)
    return [
        ("pb_pmf (n=30)", k.pb_pmf_np, k.pb_pmf_nb, (p,)),
        ("loo_pb (n=30)", k.loo_pb_np, k.loo_pb_nb, (p,)),
        ("bernstein_grid (400 x 1001)", k.bernstein_grid_np, k.bernstein_grid_nb, (w, deg, grid)),
        ("kahan_poly (400 rows)", k.kahan_poly_np, k.kahan_poly_nb, (coef, f)),
        ("split_eval (400 rows)", k.split_eval_np, k.split_eval_nb, (f, pos, neg, sig0, sig1, 0.1)),
        ("nw_predict (3000 x 1500)", k.nw_predict_np, k.nw_predict_nb, (train, y, query, 0.8)),
        ("nw_loo (3000)", k.nw_loo_np, k.nw_loo_nb, (train, y, 0.8)),
        ("solve_subproblem (N=250, 200 it)", k.solve_subproblem_np, k.solve_subproblem_nb,
         (K, np.zeros(n), 0.5, g, 1e-2, p2, s0, s1, 200, 1e-9)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':36s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, f_np, f_nb, fargs in cases(rng):
        t_np = best_of(f_np, fargs, args.repeat)
        t_nb = best_of(f_nb, fargs, args.repeat)
        diff = max_diff(f_np(*fargs), f_nb(*fargs))
        print(f"{name:36s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
