"""Timing comparison of the numba kernels against their numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

JIT compilation happens once per kernel before timing starts, so the
numbers reflect steady-state throughput only.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pcxp import kernels as K


def _time(fn, repeats: int) -> float:
    fn()  # warm-up: triggers JIT compile on the numba path
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench(repeats: int):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2048, 3)).astype(np.float32)
    cent = K._fps_np(pts, 64, 0)
    rows = rng.integers(0, 128, size=20000).astype(np.int64)
    cols = rng.integers(0, 128, size=20000).astype(np.int64)
    z = rng.uniform(size=20000).astype(np.float32)

    cases = [
        ("fps 2048->64", lambda: K._fps_np(pts, 64, 0), lambda: K._fps_numba(pts, 64, 0)),
        ("knn k=32", lambda: K._knn_np(pts, cent, 32), lambda: K._knn_numba(pts, cent, 32)),
        (
            "splat 20k->128x128",
            lambda: K._splat_np(rows, cols, z, 128, 128),
            lambda: K._splat_numba(rows, cols, z, 128, 128),
        ),
    ]

    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, np_fn, nb_fn in cases:
        t_np = _time(np_fn, repeats) * 1e3
        if K.HAS_NUMBA:
            t_nb = _time(nb_fn, repeats) * 1e3
            print(f"{name:<20}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<20}{t_np:>12.3f}{'n/a':>12}{'n/a':>10}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    bench(ap.parse_args().repeats)
