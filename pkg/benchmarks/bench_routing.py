"""Time single-instance routing: compiled kernel vs numpy kernel vs autodiff route.

    python3 benchmarks/bench_routing.py [--repeat N] [--json out.json]

Each case routes one context vector over N_u feature rows, as the
inspection tool does per target step.  Reports the median wall time per
call and the speed-up of the compiled kernel over the numpy one.
"""

from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from dccn import kernels
from dccn import tensor as T
from dccn.routing import DCCN, route
from dccn.rng import stream

CASES = [
    # (N_u, N_v, N_itr, d)
    (10, 1, 3, 32),
    (196, 1, 3, 32),
    (10, 1, 3, 256),
    (196, 1, 3, 256),
    (196, 3, 3, 256),
]


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def run(repeat=20):
    results = []
    for n_u, n_v, n_itr, d in CASES:
        net = DCCN(d, d, n_v, n_itr, seed=0, name="bench")
        rng = stream(0, f"bench/{n_u}/{n_v}/{d}")
        I = rng.normal(0.0, d ** -0.5, size=(n_u, d))
        ctx = rng.normal(size=d)
        row = {"n_u": n_u, "n_v": n_v, "n_itr": n_itr, "d": d}
        for backend in kernels.BACKENDS:
            row[backend] = _time(lambda: kernels.route_instance(ctx, I, net, backend=backend), repeat)

        def autodiff():
            with T.no_grad():
                route(ctx, I, net)

        row["autodiff"] = _time(autodiff, repeat)
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        results.append(row)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    results = run(args.repeat)
    cols = ["n_u", "n_v", "n_itr", "d", *kernels.BACKENDS, "autodiff"] + (["speedup"] if "cython" in kernels.BACKENDS else [])
    print("backends available:", ", ".join(kernels.BACKENDS))
    print(" ".join(f"{c:>10}" for c in cols))
    for row in results:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v * 1e3:>8.3f}ms" if c in ("cython", "python", "autodiff") else
                         f"{v:>9.2f}x" if c == "speedup" else f"{v:>10}")
        print(" ".join(cells))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
