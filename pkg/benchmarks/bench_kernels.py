"""Compare the compiled and numpy kernel backends on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from prvrlab import kernels


def cases(rng):
    yield "optome_merge L=128", "optome_merge", (rng.normal(size=(128, 64)), [128, 80, 50, 32])
    yield "optome_merge L=256", "optome_merge", (rng.normal(size=(256, 64)), [256, 160, 100, 64, 40, 32])
    yield "pair_match L=32", "pair_match", (rng.normal(size=(32, 64)),)
    yield "segment_max 100q x 474v", "segment_max", _segment_case(rng, 100, 474)
    yield "count_above 32x32", "count_above", (np.clip(rng.normal(size=(32, 32)) * 0.5, -1, 1), 0.7)


def _segment_case(rng, nq, nv, per_video=64, d=64):
    q = rng.normal(size=(nq, d)).astype(np.float32)
    t = rng.normal(size=(nv * per_video, d)).astype(np.float32)
    off = np.arange(0, nv * per_video + 1, per_video, dtype=np.int64)
    return q, t, off


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled backend unavailable; build with `pip install -e .`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for label, fn, case in cases(rng):
        t = {}
        for name, mod in (("python", kernels.python), ("cython", kernels.compiled)):
            f = getattr(mod, fn)
            f(*case)
            t[name] = min(timeit.repeat(lambda: f(*case), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": label, "python_ms": round(t["python"], 4), "cython_ms": round(t["cython"], 4),
                     "speedup": round(t["python"] / t["cython"], 2)})
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
