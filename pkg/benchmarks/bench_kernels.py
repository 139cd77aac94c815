"""Time the compiled kernels against the numpy fallback on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each row reports the best wall time per backend, the speed-up, and the
largest absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from vesselgen.kernels import backends


def _thin(k, vol):
    work = vol.copy()
    while True:
        removed = sum(k.thin_subiteration(work, *d) for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                                              (0, -1, 0), (0, 0, 1), (0, 0, -1)))
        if removed == 0:
            return work


def cases(rng: np.random.Generator) -> dict:
    z, y, x = np.mgrid[:40, :40, :40]
    vol = ((y - 20) ** 2 + (x - 20) ** 2 <= 36).astype(np.uint8)
    vol[:, 18:23, 5:35] = 1
    vol = np.ascontiguousarray(np.pad(vol, 1))

    a = rng.normal(size=(30, 3)) * 5
    b = a + rng.normal(size=(30, 3))
    ra = rng.uniform(0.3, 0.8, 30)
    rb = rng.uniform(0.3, 0.8, 30)

    p = rng.normal(size=(2048, 3))
    q = rng.normal(size=(2048, 3))

    x1 = rng.normal(size=(200, 3))
    x2 = rng.normal(size=(200, 3))
    cost = ((x1[:, None] - x2[None]) ** 2).sum(-1)
    lw = np.full(200, -np.log(200))

    d = rng.normal(size=400)
    e = rng.normal(size=399)
    return {
        "thinning (42^3 volume)": (lambda k: _thin(k, vol)),
        "capsule field (30 capsules, 64^3)": (
            lambda k: k.capsule_field((-12.0, -12.0, -12.0), 0.375, (64, 64, 64), a, b, ra, rb, 1.0)),
        "min_sqdist (2048 x 2048)": (lambda k: k.min_sqdist(p, q)),
        "sinkhorn (200 x 200, eps 0.05)": (lambda k: k.sinkhorn_log(cost, lw, lw, 0.05, 200, 1e-9)[0]),
        "tridiagonal QL (n = 400)": (lambda k: np.sort(k.tql_eigenvalues(d, e))),
    }


def best_time(fn, repeat: int):
    best, out = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    impls = backends()
    if "cython" not in impls:
        print("compiled kernels are not built; only the numpy fallback is available")
    print(f"{'kernel':36s} {'python s':>10s} {'cython s':>10s} {'speed-up':>9s} {'max |diff|':>11s}")
    for name, run in cases(np.random.default_rng(args.seed)).items():
        tp, op = best_time(lambda: run(impls["python"]), args.repeat)
        if "cython" in impls:
            tc, oc = best_time(lambda: run(impls["cython"]), args.repeat)
            diff = float(np.max(np.abs(np.asarray(op, dtype=float) - np.asarray(oc, dtype=float))))
            print(f"{name:36s} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f}x {diff:11.2e}")
        else:
            print(f"{name:36s} {tp:10.4f} {'-':>10s} {'-':>9s} {'-':>11s}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
