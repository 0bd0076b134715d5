#!/usr/bin/env python3
"""Benchmark the compiled training kernels against the NumPy fallback.

The kernel table times one device-shard workload per call; the end-to-end
section runs a full simulation with each backend swapped in. At small shard
sizes the compiled loop wins mostly by skipping per-call array overhead; at
large shards the BLAS-backed fallback catches up.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import time
from contextlib import contextmanager

import numpy as np

from fogsim import kernels

CASES = [
    # samples, feature_dim, classes (one device's local_update workload)
    (50, 10, 3),
    (200, 10, 3),
    (200, 50, 10),
    (1000, 100, 10),
]
GD_STEPS = 5


def best_of(fn, repeat: int, trials: int = 5) -> float:
    best = float("inf")
    for _ in range(trials):
        start = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - start) / repeat)
    return best


def bench_case(backend, n, d, c, repeat):
    rng = np.random.default_rng(0)
    X = np.ascontiguousarray(rng.normal(size=(n, d)))
    y = rng.integers(0, c, size=n, dtype=np.int64)
    w = np.ascontiguousarray(rng.normal(scale=0.3, size=d * c))
    return {
        "grad": best_of(lambda: backend.softmax_loss_grad(w, X, y), repeat),
        "gd": best_of(lambda: backend.gd_steps(w, X, y, GD_STEPS, 0.05), repeat),
        "eval": best_of(lambda: backend.eval_loss_correct(w, X, y), repeat),
    }


@contextmanager
def active_backend(name: str):
    backend = kernels.get_backend(name)
    saved = (kernels.softmax_loss_grad, kernels.gd_steps, kernels.eval_loss_correct)
    kernels.softmax_loss_grad = backend.softmax_loss_grad
    kernels.gd_steps = backend.gd_steps
    kernels.eval_loss_correct = backend.eval_loss_correct
    try:
        yield backend
    finally:
        kernels.softmax_loss_grad, kernels.gd_steps, kernels.eval_loss_correct = saved


def end_to_end(name: str) -> float:
    from fogsim.config import SimulationConfig
    from fogsim.engine import run_simulation

    cfg = SimulationConfig.from_dict({
        "seed": 0,
        "layers": [
            {"nodes": 24, "cluster_size": 4, "d2d": "complete", "d2d_enabled": True},
            {"nodes": 6, "cluster_size": 0},
            {"nodes": 1},
        ],
        "data": {"feature_dim": 10, "classes": 3, "samples_per_device": 200,
                 "dirichlet_alpha": 0.5, "test_samples": 1000},
        "training": {"global_rounds": 30, "local_steps": 5, "lr": 0.05},
        "consensus": {"rounds": 10},
    })
    with active_backend(name):
        start = time.perf_counter()
        run_simulation(cfg)
        return time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200,
                        help="calls per timing trial (default 200)")
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {backends} (default: {kernels.BACKEND})")
    if "cython" not in backends:
        print("compiled extension missing; only the fallback will be timed")

    header = f"{'case (n,d,C)':>16} {'op':>6}" + "".join(
        f" {name:>12}" for name in backends
    )
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print("\nper-call kernel time (microseconds)")
    print(header)
    for n, d, c in CASES:
        timings = {
            name: bench_case(kernels.get_backend(name), n, d, c, args.repeat)
            for name in backends
        }
        for op in ("grad", "gd", "eval"):
            row = f"{f'({n},{d},{c})':>16} {op:>6}"
            for name in backends:
                row += f" {timings[name][op] * 1e6:12.1f}"
            if len(backends) == 2:
                ratio = timings["python"][op] / timings["cython"][op]
                row += f" {ratio:8.1f}x"
            print(row)

    print("\nend-to-end simulation (24 devices, 30 rounds)")
    for name in backends:
        print(f"  {name:>7}: {end_to_end(name):.2f} s")


if __name__ == "__main__":
    main()
