"""Benchmark the conv1d kernels: numba @njit loops vs the pure-numpy path.

Shapes mirror the two model presets' convolution stages plus a batch-heavy
training step. Run from the repo root:

    python3 benchmarks/benchmark_kernels.py

Force the fallback everywhere else with NILMPRUNE_NO_NUMBA=1; this script
always times both paths side by side (it needs numba importable to do so).
"""

import time

import numpy as np

from nilmprune import kernels


def time_fn(fn, *args, repeats=30):
    fn(*args)  # warmup / jit compile
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_case(name, batch, c_in, c_out, k, length, stride=1):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, c_in, length))
    w = rng.normal(size=(c_out, c_in, k))
    b = rng.normal(size=c_out)
    l_out = (length - k) // stride + 1
    g = rng.normal(size=(batch, c_out, l_out))

    t_np_f = time_fn(kernels.conv1d_forward_numpy, x, w, b, stride)
    t_nb_f = time_fn(kernels._conv1d_forward_nb, x, w, b, stride)
    t_np_b = time_fn(kernels.conv1d_backward_numpy, x, w, g, stride)
    t_nb_b = time_fn(kernels._conv1d_backward_nb, x, w, g, stride)

    print(f"{name:28s} fwd numpy {t_np_f * 1e3:8.3f} ms  numba {t_nb_f * 1e3:8.3f} ms "
          f"({t_np_f / t_nb_f:5.2f}x)   bwd numpy {t_np_b * 1e3:8.3f} ms  "
          f"numba {t_nb_b * 1e3:8.3f} ms ({t_np_b / t_nb_b:5.2f}x)")
    return t_np_f / t_nb_f, t_np_b / t_nb_b


def main():
    if kernels.BACKEND != "numba":
        raise SystemExit("numba path unavailable (NILMPRUNE_NO_NUMBA set or "
                         "numba missing); nothing to compare")
    print(f"active backend: {kernels.BACKEND}")
    print("=" * 110)
    cases = [
        ("desk conv1 (batch 8)", 8, 1, 4, 9, 256, 2),
        ("desk conv4 (batch 8)", 8, 8, 16, 5, 28, 2),
        ("full-scale conv1 (batch 1)", 1, 1, 30, 10, 480, 1),
        ("full-scale conv3 (batch 1)", 1, 30, 40, 6, 464, 1),
        ("full-scale conv5 (batch 4)", 4, 50, 50, 5, 455, 1),
    ]
    speedups = []
    for case in cases:
        speedups.extend(bench_case(*case))
    print("=" * 110)
    print(f"geometric-mean speedup (numba over numpy): "
          f"{np.exp(np.mean(np.log(speedups))):.2f}x")


if __name__ == "__main__":
    main()
