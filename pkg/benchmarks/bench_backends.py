"""Time the compiled local-polynomial backend against the pure NumPy one.

The backend is chosen once at import time (see hetfx._backend), so each
measurement runs in a fresh subprocess with HETFX_BACKEND set to "c" or
"py". Workloads cover the raw moment-sum kernels (compact and unbounded
kernels, both polynomial degrees used by the estimators) and two end-to-end
paths: a debiased curve fit at a fixed bandwidth and leave-one-out bandwidth
selection. For every workload the two backends must agree numerically; the
parent process checks a summary value before printing the timing table.

Usage:
    python benchmarks/bench_backends.py [--n 20000] [--grid 101] [--repeats 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit


def _workloads(n: int, m: int, seed: int):
    import numpy as np

    from hetfx import _backend, localpoly

    rng = np.random.default_rng(seed)
    v = np.sort(rng.standard_normal(n))
    phi = np.sin(2.0 * v) + rng.standard_normal(n)
    centers = np.linspace(-2.0, 2.0, m)
    grid = np.linspace(-1.5, 1.5, 41)
    n_cv = min(n, 4000)

    tasks = [
        ("moments uniform deg1", lambda: _backend.moment_sums(v, phi, centers, 0.3, 1, "uniform")),
        ("moments epanechnikov deg2", lambda: _backend.moment_sums(v, phi, centers, 0.5, 2, "epanechnikov")),
        ("moments gaussian deg1", lambda: _backend.moment_sums(v, phi, centers, 0.3, 1, "gaussian")),
        ("curve, default settings", lambda: localpoly.curve(v, phi, grid=grid, h=0.4, mode="debiased")),
        ("loocv gaussian n=%d" % n_cv,
         lambda: localpoly.loocv_bandwidth(v[:n_cv], phi[:n_cv], kernel="gaussian")),
        ("loocv cubic epan. n=%d" % n_cv,
         lambda: localpoly.loocv_bandwidth(v[:n_cv], phi[:n_cv], degree=3, kernel="epanechnikov")),
    ]

    def summary(name, value):
        if name.startswith("moments"):
            S, R, cnt = value
            return float(S.sum() + R.sum() + cnt.sum())
        if name.startswith("curve"):
            return float(np.nansum(value.estimate))
        return float(value.h)

    return _backend.BACKEND, tasks, summary


def _run_child(args) -> None:
    backend, tasks, summary = _workloads(args.n, args.grid, args.seed)
    out = {"backend": backend, "results": []}
    for name, fn in tasks:
        best = min(timeit.repeat(fn, number=1, repeat=args.repeats))
        out["results"].append({"name": name, "seconds": best, "summary": summary(name, fn())})
    json.dump(out, sys.stdout)


def _measure(backend: str, args) -> dict:
    env = dict(os.environ, HETFX_BACKEND=backend)
    cmd = [sys.executable, os.path.abspath(__file__), "--child",
           "--n", str(args.n), "--grid", str(args.grid),
           "--repeats", str(args.repeats), "--seed", str(args.seed)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"backend {backend!r} failed:\n{proc.stderr}")
    return json.loads(proc.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=20_000, help="observations")
    parser.add_argument("--grid", type=int, default=101, help="evaluation points")
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats (min is kept)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)

    if args.child:
        _run_child(args)
        return 0

    fast = _measure("c", args)
    pure = _measure("py", args)
    if fast["backend"] != "compiled" or pure["backend"] != "python":
        raise SystemExit(f"backend selection failed: got {fast['backend']!r} / {pure['backend']!r}")

    print(f"n={args.n}, grid={args.grid}, repeats={args.repeats} (best shown)")
    header = f"{'workload':<28} {'compiled':>10} {'python':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for fr, pr in zip(fast["results"], pure["results"]):
        rel = abs(fr["summary"] - pr["summary"]) / max(abs(pr["summary"]), 1.0)
        if rel > 1e-9:
            raise SystemExit(f"{fr['name']}: backends disagree (rel err {rel:.2e})")
        print(f"{fr['name']:<28} {fr['seconds']:>9.4f}s {pr['seconds']:>9.4f}s "
              f"{pr['seconds'] / fr['seconds']:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
