#!/usr/bin/env python3
"""Scaling study: fusion operator wall time against token count.

Times the expert mixer and the dense cross-attention comparator at the full
model width over a geometric token ladder, fits log-log slopes, and prints
the relative speed at each rung.  Single BLAS thread, interleaved sampling.
"""

import argparse
import json

import numpy as np

from mmfuse.bench import bench_fusion_scaling


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-values", default="128,256,512,1024")
    ap.add_argument("--d-model", type=int, default=768)
    ap.add_argument("--samples", type=int, default=30)
    ap.add_argument("--warmups", type=int, default=5)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", help="write the raw result as JSON")
    args = ap.parse_args()

    result = bench_fusion_scaling(
        n_values=[int(v) for v in args.n_values.split(",")],
        d_model=args.d_model, seed=args.seed,
        n_samples=args.samples, warmups=args.warmups,
    )
    print(f"{'operator':<10} {'n':>6} {'median_ms':>10} {'iqr_ms':>8} {'gflops':>8}")
    for r in result["reports"]:
        print(f"{r.operator:<10} {r.n_tokens:>6} {r.median_s * 1e3:>10.3f} "
              f"{r.iqr_s * 1e3:>8.3f} {r.gflops:>8.1f}")
    for op, slope in result["slopes"].items():
        print(f"slope {op}: {slope:.3f}")
    for n, ratio in result["xattn_over_hmoe"].items():
        print(f"n={n}: mixer {ratio:.2f}x faster than dense cross attention")
    if args.out:
        payload = {
            "slopes": result["slopes"],
            "xattn_over_hmoe": result["xattn_over_hmoe"],
            "points": [
                {"operator": r.operator, "n": r.n_tokens, "median_s": r.median_s,
                 "iqr_s": r.iqr_s, "macs": r.macs, "inner": r.inner_reps}
                for r in result["reports"]
            ],
        }
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
