"""Compare the compiled kernels with the NumPy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call for each kernel and backend, the
speedup, and a closed-loop timing with each backend selected.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from payload_predictor import kernels
from payload_predictor.mpc import run_closed_loop
from payload_predictor.sim import PlantParams


def median_time(fn, repeat, number):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - t0) / number)
    return float(np.median(times))


def kernel_cases():
    params = PlantParams()
    pp, qp = params.plant_vector(), params.quad_vector()
    s = np.zeros(19)
    s[2], s[6] = 2.0, 1.0
    s[15] = -params.l  # payload hanging straight down
    x0 = s[:13].copy()
    u = np.array([params.m * 9.81 * 1.1, 0.0, 0.0, 0.0])
    us = np.tile(u, (20, 1))
    ws = np.zeros((20, 6))
    xs = kernels.get_backend("python").quad_rollout(x0, us, ws, qp, 0.02, 1)[:-1]
    return {
        "plant_integrate (20 ms, 20 substeps)":
            lambda b: b.plant_integrate(s, 1, u, pp, 0.02, 20),
        "quad_rollout (N=20)":
            lambda b: b.quad_rollout(x0, us, ws, qp, 0.02, 1),
        "quad_linearize (N=20)":
            lambda b: b.quad_linearize(xs, us, ws, qp, 0.02, 1, 1e-6),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--duration", type=float, default=1.0, help="closed-loop seconds")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback is timed")
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in kernel_cases().items():
        t = {b: median_time(lambda: fn(kernels.get_backend(b)), args.repeat, args.number)
             for b in backends}
        row = f"{name:40s}" + "".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
        if len(t) == 2:
            row += f"  {t['python'] / t['cython']:9.1f}x"
        print(row)

    print(f"\nclosed-loop nominal MPC, circle, {args.duration:g} s")
    for b in backends:
        prev = kernels.use_backend(b)
        try:
            t0 = time.perf_counter()
            log = run_closed_loop(PlantParams(), ref_kind="circle", duration=args.duration)
            wall = time.perf_counter() - t0
        finally:
            kernels.use_backend(prev)
        print(f"  {b:8s} {wall:7.2f} s wall, median solve {np.median(log.extras['solve_ms']):.2f} ms")


if __name__ == "__main__":
    main()
