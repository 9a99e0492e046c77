"""Time each kernel under its numba and numpy implementations.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The numba timings exclude the first (compiling) call.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from rpkit import kernels
from rpkit._jit import HAVE_NUMBA


def cases(rng):
    n, d = 4096, 128
    idx = rng.integers(0, 512, size=n)
    src = rng.standard_normal((n, d)).astype(np.float32)
    x = rng.standard_normal((2048, 128)).astype(np.float32)
    gamma = np.ones(128, np.float32)
    beta = np.zeros(128, np.float32)
    _, xhat, rstd = kernels.layer_norm_fwd_numpy(x, gamma, beta, 1e-5)
    g = rng.standard_normal(x.shape).astype(np.float32)
    box = rng.integers(0, 200, size=(400, 4))
    a = rng.integers(0, 500, size=(5000, 4))
    b = rng.integers(0, 500, size=(5000, 4))
    la = rng.integers(0, 40, size=5000)
    lb = rng.integers(0, 40, size=5000)
    m = 1_000_000
    p = rng.standard_normal(m).astype(np.float32)
    pg = rng.standard_normal(m).astype(np.float32)

    def adam(f):
        pp, mm, vv = p.copy(), np.zeros_like(p), np.zeros_like(p)
        return lambda: f(pp, pg, mm, vv, 1e-3, 0.9, 0.99, 0.01, 0.1, 0.01, 1e-8, 1.0)

    return {
        "scatter_add_rows": lambda f: (lambda: f(512, idx, src)),
        "layer_norm_fwd": lambda f: (lambda: f(x, gamma, beta, 1e-5)),
        "layer_norm_bwd": lambda f: (lambda: f(g, xhat, rstd, gamma)),
        "aligned_pair_count": lambda f: (lambda: f(box[:, 0], box[:, 1], box[:, 0] + box[:, 2], box[:, 1] + box[:, 3])),
        "paired_iou": lambda f: (lambda: f(a, b)),
        "contingency": lambda f: (lambda: f(la, lb, 40, 40)),
        "adamw_update": adam,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba unavailable; only the numpy path can be timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, make in cases(rng).items():
        res = {"kernel": name}
        for impl in ("numpy", "numba"):
            if impl == "numba" and not HAVE_NUMBA:
                continue
            fn = make(getattr(kernels, f"{name}_{impl}"))
            fn()
            number = 3
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            res[impl] = best * 1e3
        speed = res["numpy"] / res["numba"] if "numba" in res else float("nan")
        print(f"{name:<20} {res['numpy']:>10.3f} {res.get('numba', float('nan')):>10.3f} {speed:>7.1f}x")
        rows.append(res)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
