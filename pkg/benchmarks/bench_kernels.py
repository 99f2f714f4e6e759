"""Timing comparison of the two kernel lanes (pure numpy vs numba @njit).

Runs each hot kernel on realistic shapes and reports per-call wall time for
both lanes plus the speedup. The jitted lane is warmed up first so JIT
compilation never lands inside a timed region. Lanes are imported directly
(orthoclf.kernels.reference / .jitted), so the ORTHOCLF_BACKEND env flag
does not affect this script.

Usage: python3 benchmarks/bench_kernels.py [--batch 256] [--dim 784] [--repeat 50]
"""

import argparse
import time

import numpy as np

from orthoclf.kernels import reference as ref

try:
    from orthoclf.kernels import jitted as jit
except ImportError:
    jit = None


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(batch, dim, rng):
    x = rng.normal(size=(batch, dim))
    slopes = rng.uniform(0.1, 0.5, size=dim)
    gout = rng.normal(size=(batch, dim))
    grad = rng.normal(size=(batch, dim))
    x0 = rng.uniform(size=(batch, dim))
    xa = np.clip(x0 + rng.uniform(-0.05, 0.05, size=(batch, dim)), 0, 1)
    delta = rng.normal(scale=0.1, size=(batch, dim))
    param = rng.normal(size=(batch, dim))
    vel = np.zeros_like(param)

    def sgd_case(lane):
        p, v = param.copy(), vel.copy()
        return lambda: lane.sgd_update(p, grad, v, 0.1, 0.9)

    return [
        ("prelu_fwd", lambda lane: lambda: lane.prelu_fwd(x, slopes)),
        ("prelu_bwd", lambda lane: lambda: lane.prelu_bwd(x, slopes, gout)),
        ("sgd_update", sgd_case),
        ("linf_step", lambda lane: lambda: lane.linf_step(xa, grad, x0, 0.01, 0.1)),
        ("l1_project_rows", lambda lane: lambda: lane.l1_project_rows(delta, 1.0)),
        ("topq_sign_step", lambda lane: lambda: lane.topq_sign_step(delta, grad, 0.01, 0.05)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--dim", type=int, default=784)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = _cases(args.batch, args.dim, rng)
    print(f"shapes: batch={args.batch} dim={args.dim}, best of {args.repeat}")
    print(f"{'kernel':<18} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, make in cases:
        t_ref = _time(make(ref), args.repeat)
        if jit is None:
            print(f"{name:<18} {t_ref * 1e6:>10.1f}us {'n/a':>12} {'n/a':>9}")
            continue
        make(jit)()  # warm-up: compile outside the timed region
        t_jit = _time(make(jit), args.repeat)
        print(
            f"{name:<18} {t_ref * 1e6:>10.1f}us {t_jit * 1e6:>10.1f}us "
            f"{t_ref / t_jit:>8.2f}x"
        )
    if jit is None:
        print("numba lane unavailable (install numba to compare)")


if __name__ == "__main__":
    main()
