"""Time the compiled kernels against their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (numba compiles on first call), then the
best of N timed calls is reported for both dispatch paths together with the
largest absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from semimap import _accel, kernels


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_case(name, fn, repeat):
    out = {}
    times = {}
    for flag in (True, False):
        if flag and not _accel.HAS_NUMBA:
            continue
        _accel.set_use_numba(flag)
        out[flag] = fn()
        times[flag] = best_of(fn, repeat)
    _accel.set_use_numba(_accel.HAS_NUMBA)
    numpy_ms = times[False] * 1e3
    if True in times:
        a, b = out[True], out[False]
        a = a[0] if isinstance(a, tuple) else a
        b = b[0] if isinstance(b, tuple) else b
        both_inf = np.isinf(a) & np.isinf(b)
        diff = float(np.max(np.abs(a[~both_inf] - b[~both_inf]), initial=0.0))
        numba_ms = times[True] * 1e3
        print(f"{name:<28}{numba_ms:>10.3f}{numpy_ms:>10.3f}{numpy_ms / numba_ms:>9.2f}x{diff:>12.2e}")
    else:
        print(f"{name:<28}{'-':>10}{numpy_ms:>10.3f}{'-':>10}{'-':>12}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    x = rng.normal(size=(64, 16, 16, 16))
    cols = kernels.im2col(x, 3, 1, 1)
    g = rng.normal(size=cols.shape)
    pooled = rng.normal(size=(64, 16, 16, 16))
    _, arg = kernels.maxpool2x2(pooled)
    gp = rng.normal(size=(64, 8, 8, 16))
    caps = np.c_[rng.uniform(-12, 12, (16, 3)), rng.uniform(-12, 12, (16, 3)), rng.uniform(2, 5, 16)]
    caps[:, 2] += 200
    caps[:, 5] += 200
    grid = np.linspace(-24, 24, 32)

    print(f"numba available: {_accel.HAS_NUMBA}")
    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>10}{'max |diff|':>12}")
    run_case("im2col 64x16x16x16 k3", lambda: kernels.im2col(x, 3, 1, 1), args.repeat)
    run_case("col2im 64x16x16x16 k3", lambda: kernels.col2im(g, x.shape, 3, 1, 1), args.repeat)
    run_case("maxpool2x2 64x16x16x16", lambda: kernels.maxpool2x2(pooled), args.repeat)
    run_case("maxpool2x2 backward", lambda: kernels.maxpool2x2_backward(gp, arg), args.repeat)
    run_case("raster 16 capsules 32x32", lambda: kernels.raster_capsules(grid, grid, caps, np.inf), args.repeat)


if __name__ == "__main__":
    main()
