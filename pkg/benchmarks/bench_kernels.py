"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--dims 1 2 10 40]

Each case runs the same seeded computation on both backends, checks that
the results agree, and prints the best wall time of ``--repeat`` runs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from enkbf_lab.enkbf import run_enkbf
from enkbf_lab.kbf import run_kbf
from enkbf_lab.kernels import HAVE_CYTHON
from enkbf_lab.mlmc import run_coupled
from enkbf_lab.model import ModelGenSpec, make_ou_model
from enkbf_lab.paths import simulate_truth_and_observations
from enkbf_lab.rng import derive_stream


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(d, level, T, n):
    m = make_ou_model(ModelGenSpec(d, d, block_size=10, seed=1))
    rec = simulate_truth_and_observations(m, T, level, derive_stream(1))
    s = derive_stream(2)
    yield (f"enkbf det   d={d:<3} N={n:<4}",
           lambda b: run_enkbf("deterministic", n, level, rec, m, s, b)[1])
    yield (f"enkbf van   d={d:<3} N={n:<4}",
           lambda b: run_enkbf("vanilla", n, level, rec, m, s, b)[1])
    yield (f"coupled det d={d:<3} N={n:<4}",
           lambda b: run_coupled("deterministic", n, level, rec, m, s, b).increment)
    yield (f"kbf         d={d:<3}       ",
           lambda b: run_kbf(rec, level, m, "vanilla", b).final.mean)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--dims", type=int, nargs="+", default=[1, 2, 10, 40])
    ap.add_argument("--level", type=int, default=6)
    ap.add_argument("--T", type=int, default=10)
    ap.add_argument("--particles", type=int, default=100)
    args = ap.parse_args(argv)
    if not HAVE_CYTHON:
        print("compiled extension not available; build with `pip install -e .`")
        return 1
    print(f"level {args.level}, T {args.T}, best of {args.repeat}")
    print(f"{'case':<30}{'cython [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max diff':>12}")
    for d in args.dims:
        for name, fn in cases(d, args.level, args.T, args.particles):
            tc, yc = best_time(lambda: fn("cython"), args.repeat)
            tp, yp = best_time(lambda: fn("python"), args.repeat)
            diff = float(np.max(np.abs(np.asarray(yc) - np.asarray(yp))))
            print(f"{name:<30}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
