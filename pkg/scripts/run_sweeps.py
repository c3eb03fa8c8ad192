#!/usr/bin/env python3
"""Structural sweeps: time and size along each tunable axis, one at a time.

Covers attention head count, adapter rank, guidance weight, weight precision,
expert count, and expert rank at the full model width.  Quality numbers are
out of scope here; these runs never train anything.
"""

import argparse

from mmfuse.bench import sweep_axis

DEFAULT_SWEEPS = [
    ("heads", [1, 2, 3, 4, 6, 8, 12, 16]),
    ("lora_rank", [1, 2, 4, 8, 16, 32]),
    ("w_init", [0.0, 0.25, 0.5, 0.75, 1.0]),
    ("weight_type", ["float32", "float64"]),
    ("experts", [1, 2, 4, 8, 16]),
    ("hmoe_rank", [1, 2, 4, 8, 16]),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=15)
    ap.add_argument("--warmups", type=int, default=3)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    for axis, values in DEFAULT_SWEEPS:
        print(f"== sweep {axis} ==")
        result = sweep_axis(axis, values, seed=args.seed,
                            n_samples=args.samples, warmups=args.warmups)
        for row in result["rows"]:
            if "error" in row:
                print(f"  {axis}={row['value']}: error: {row['error']}")
            else:
                print(f"  {axis}={row['value']}: median {row['median_s'] * 1e3:.3f} ms, "
                      f"params {row['params']:,}, macs {row['macs']:,}")
        print(f"  note: {result['footer']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
