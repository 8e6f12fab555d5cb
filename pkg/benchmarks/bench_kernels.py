"""Numba vs numpy timings for the tree-ensemble kernels.

Run with ``python3 benchmarks/bench_kernels.py``.  Kernel timings call both
backends in-process; the end-to-end fit runs in subprocesses, once with
STAGEPRED_NUMPY=1, since the backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from stagepred._kernels import NUMBA_KERNELS, NUMPY_KERNELS


def best_of(fn, repeat):
    fn()  # warm-up, also triggers jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, seed=0):
    rng = np.random.default_rng(seed)
    n_features, n_bins, n_slots = 33, 64, 16
    bins = rng.integers(0, n_bins, (n, n_features)).astype(np.uint8)
    rows = np.arange(n)
    slot = rng.integers(0, n_slots, n)
    target = rng.normal(size=n)
    sums, counts = NUMBA_KERNELS["histograms"](bins, rows, slot, target, n_slots, n_bins)
    n_thr = np.full(n_features, n_bins - 1, dtype=np.int64)

    n_trees, n_nodes = 200, 63
    feature = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    left = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    right = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    for node in range(31):
        feature[:, node] = rng.integers(0, n_features, n_trees)
        left[:, node] = 2 * node + 1
        right[:, node] = 2 * node + 2
    threshold = rng.normal(size=(n_trees, n_nodes))
    value = rng.normal(size=(n_trees, n_nodes))
    group = np.arange(n_trees) % 2
    X = rng.normal(size=(n, n_features))

    return {
        "histograms": lambda k: k["histograms"](bins, rows, slot, target, n_slots, n_bins),
        "best_splits": lambda k: k["best_splits"](sums, counts, n_thr, 5),
        "forest_predict": lambda k: k["forest_predict"](X, feature, threshold, left, right, value, group, 2),
    }


_FIT = """
import sys, time, numpy as np
from stagepred.gbdt import TreeParams, fit_gbdt
n = int(sys.argv[1])
rng = np.random.default_rng(0)
X = rng.normal(size=(n, 33)); y = np.exp(X[:, 0] + rng.normal(0, 0.3, n))
fit_gbdt(X[:200], y[:200], TreeParams(n_estimators=5), seed=0)
t0 = time.perf_counter()
fit_gbdt(X, y, TreeParams(n_estimators=100), seed=1)
print(time.perf_counter() - t0)
"""


def fit_seconds(n, force_numpy):
    env = dict(os.environ)
    env.pop("STAGEPRED_NUMPY", None)
    if force_numpy:
        env["STAGEPRED_NUMPY"] = "1"
    out = subprocess.run([sys.executable, "-c", _FIT, str(n)], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000, help="rows per kernel call")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fit-n", type=int, default=5000, help="rows for the end-to-end fit")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    rows = []
    for name, call in kernel_cases(args.n).items():
        a = best_of(lambda: call(NUMBA_KERNELS), args.repeat)
        b = best_of(lambda: call(NUMPY_KERNELS), args.repeat)
        rows.append({"case": name, "numba_s": a, "numpy_s": b, "speedup": b / a})
    a, b = fit_seconds(args.fit_n, False), fit_seconds(args.fit_n, True)
    rows.append({"case": f"fit_gbdt n={args.fit_n}", "numba_s": a, "numpy_s": b, "speedup": b / a})

    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'case':<22}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['case']:<22}{r['numba_s'] * 1e3:>12.2f}{r['numpy_s'] * 1e3:>12.2f}{r['speedup']:>9.1f}x")


if __name__ == "__main__":
    main()
