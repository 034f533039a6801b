"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel: median seconds for each backend and the speedup.
The numba figures exclude the first (compiling) call.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from chromapred import _kernels_numpy as knp
from chromapred.integerize import build_lut_exp, build_lut_sum

try:
    from chromapred import _kernels_numba as knb
except ImportError:  # numba missing
    knb = None


def cases(rng):
    x4 = rng.random((32, 64, 20, 20))
    xi = rng.integers(0, 4096, (64, 20, 20)).astype(np.int64)
    wi = rng.integers(-4096, 4096, (64, 64, 3, 3)).astype(np.int64)
    bi = rng.integers(-4096, 4096, 64).astype(np.int64)
    logits = rng.integers(-(1 << 16), 1 << 16, (256, 65)).astype(np.int64)
    lut_e, lut_s = build_lut_exp(-15, 16, 4), build_lut_sum(65 << 16, 1024, 28)
    cols = knp.im2col(x4, 3)
    return {
        "im2col 32x64x20x20 k3": lambda k: k.im2col(x4, 3),
        "col2im 32x64x20x20 k3": lambda k: k.col2im(cols, 64, 20, 20, 3),
        "int_conv 64->64 20x20 k3": lambda k: k.int_conv(xi, wi, bi, 12),
        "int_softmax 256x65": lambda k: k.int_softmax_rows(logits, 512, 8, 8, -240, lut_e, lut_s, 1024),
        "xoshiro 1e5 draws": lambda k: k.xoshiro_fill(np.array([1, 2, 3, 4], dtype=np.uint64), 100_000),
    }


def bench(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, run in cases(rng).items():
        t_np = bench(lambda: run(knp), args.repeat)
        if knb is None:
            print(f"{name:28s} {t_np:10.5f} {'-':>10s} {'-':>8s}")
            continue
        run(knb)  # compile
        t_nb = bench(lambda: run(knb), args.repeat)
        print(f"{name:28s} {t_np:10.5f} {t_nb:10.5f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
