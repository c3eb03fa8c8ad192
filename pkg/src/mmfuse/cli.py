"""Command line front end.

Subcommands cover measurement (bench, sweep), static accounting (audit),
verification (oracle, gradcheck), a demo forward pass over a checkpoint, and
alignment metrics over saved attention maps.  Rows print as aligned text by
default, as JSON lines with --json, and optionally also to a CSV file.  The
process exits 0 only when every check the invocation ran came back clean.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import audit as audit_mod
from . import bench as bench_mod
from . import tensorfile
from .attention import DualStream
from .encoder import (
    EncoderConfig,
    encoder_forward,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
    vit_base_config,
)
from .errors import ConfigError, TensorFileError
from .gradcheck import run_gradcheck_suites
from .hmoe import HmoeConfig
from .metrics import alignment_stats
from .oracles import run_oracle_suites
from .tensor import Rng

DEFAULT_SEED = 42


def _env_seed() -> int:
    raw = os.environ.get("MMFUSE_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MMFUSE_SEED must be an integer, got {raw!r}")


def _emit(rows: list[dict], args) -> None:
    if not rows:
        return
    if args.json:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    else:
        keys = []
        for row in rows:
            for k in row:
                if k not in keys:
                    keys.append(k)
        rendered = [{k: _fmt(row.get(k, "")) for k in keys} for row in rows]
        widths = {k: max(len(k), *(len(r[k]) for r in rendered)) for k in keys}
        print("  ".join(k.ljust(widths[k]) for k in keys))
        for r in rendered:
            print("  ".join(r[k].ljust(widths[k]) for k in keys))
    if args.csv:
        keys = []
        for row in rows:
            for k in row:
                if k not in keys:
                    keys.append(k)
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, bool):
        return "yes" if v else "no"
    return str(v)


def _ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


# ------------------------------------------------------------------ bench

def cmd_bench(args) -> int:
    result = bench_mod.bench_fusion_scaling(
        n_values=_ints(args.n_values), d_model=args.d_model,
        operators=tuple(args.operators.split(",")), seed=args.seed,
        dtype=np.dtype(args.dtype).type, n_samples=args.samples,
        warmups=args.warmups,
    )
    rows = [asdict(r) for r in result["reports"]]
    _emit(rows, args)
    for op, slope in result["slopes"].items():
        print(f"slope {op}: {slope:.3f}")
    for n, ratio in result["xattn_over_hmoe"].items():
        print(f"xattn/hmoe time ratio at n={n}: {ratio:.2f}x")
    if result["any_unreliable"]:
        print("warning: at least one point had a wide interquartile range")
    return 0


def _sweep_value(axis: str, raw: str):
    if axis == "weight_type":
        return raw
    if axis == "w_init":
        return float(raw)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{axis} values must be integers, got {raw!r}")


def cmd_sweep(args) -> int:
    values = [_sweep_value(args.axis, v.strip()) for v in args.values.split(",")]
    result = bench_mod.sweep_axis(
        args.axis, values, d_model=args.d_model, seed=args.seed,
        dtype=np.dtype(args.dtype).type, n_samples=args.samples,
        warmups=args.warmups,
    )
    rows = result["rows"]
    if args.json:
        rows = rows + [{"note": result["footer"]}]
        _emit(rows, args)
    else:
        _emit(rows, args)
        print(f"note: {result['footer']}")
    ok_rows = [r for r in result["rows"] if "error" not in r]
    return 0 if ok_rows else 1


# ------------------------------------------------------------------ audit

def _audit_config(args) -> EncoderConfig:
    return vit_base_config(
        n_z=args.n_z, n_c=args.n_c, insert_every=args.insert_every,
        lora_rank=args.lora_rank,
    )


def cmd_audit(args) -> int:
    config = _audit_config(args)
    report = audit_mod.full_audit(config)
    rows = []
    failed = False
    for key in ("lora_learnable", "mixer_learnable", "learnable_total"):
        entry = report["params"][key]
        rows.append({"quantity": key, **entry})
        if not entry["within_tolerance"]:
            failed = True
    rows.append({"quantity": "frozen_total",
                 "computed": report["params"]["frozen_total"]})
    rows.append({"quantity": "merged_lora_learnable",
                 "computed": report["params"]["merged_lora_learnable"]})
    macs = report["macs"]
    hs = report["head_sweep"]
    if args.json:
        rows.append({"quantity": "macs_unmerged",
                     "computed": macs["unmerged"]["total"]})
        rows.append({"quantity": "macs_merged",
                     "computed": macs["merged"]["total"]})
        rows.append({"quantity": "adapter_overhead_pct",
                     "computed": macs["adapter_overhead_pct"]})
        rows.append({"quantity": "mixer_head_spread_pct",
                     "computed": hs["spread_pct"]})
        for row in report["expert_pairs"]:
            rows.append({"quantity": "expert_pair", **row})
        for row in report["lora_ranks"]:
            rows.append({"quantity": "adapter_rank", **row})
        _emit(rows, args)
        return 1 if failed else 0
    _emit(rows, args)
    print(f"macs unmerged: {macs['unmerged']['total']:,}")
    print(f"macs merged:   {macs['merged']['total']:,}")
    print(f"adapter overhead: {macs['adapter_overhead_pct']:.3f}%")
    print(f"mixer head sweep {sorted(hs['per_head_total'])}: "
          f"spread {hs['spread_pct']:.3f}%")
    for row in report["expert_pairs"]:
        print(f"experts ({row['attn_experts']:>2},{row['ffn_experts']:>2}): "
              f"learnable {row['learnable_total']:,}")
    for row in report["lora_ranks"]:
        print(f"adapter rank {row['rank']:>2}: learnable {row['learnable_total']:,}")
    return 1 if failed else 0


# ------------------------------------------------------------- verification

def cmd_oracle(args) -> int:
    result = run_oracle_suites(seed=args.seed, n_attention=args.configs,
                               n_hmoe=args.configs, tol=args.tol)
    rows = [asdict(c) for c in result["cases"] if not c.passed]
    if rows:
        _emit(rows, args)
    print(f"oracle cases: {result['n_cases']}, failed: {result['n_failed']}, "
          f"max error {result['max_error']:.3e} (tol {result['tolerance']:.0e})")
    print(f"worst case: {result['worst']}")
    print("verdict: PASS" if result["passed"] else "verdict: FAIL")
    return 0 if result["passed"] else 1


def cmd_gradcheck(args) -> int:
    result = run_gradcheck_suites(seed=args.seed, n_attention=args.configs,
                                  n_hmoe=args.configs, tol=args.tol,
                                  eps=args.eps)
    rows = [asdict(r) for r in result["reports"] if not r.passed]
    if rows:
        _emit(rows, args)
    print(f"gradient checks: {result['n_reports']}, failed: {result['n_failed']}, "
          f"max rel err {result['max_rel_err']:.3e} (tol {result['tolerance']:.0e})")
    print(f"worst: {result['worst']}")
    print("verdict: PASS" if result["passed"] else "verdict: FAIL")
    return 0 if result["passed"] else 1


# ------------------------------------------------------------ demo forward

def _demo_config() -> EncoderConfig:
    return EncoderConfig(
        d_model=24, n_heads=2, n_z=2, n_c=4, n_layers=2, insert_every=1,
        lora_rank=2,
        hmoe_attn=HmoeConfig(d_model=24, heads_per_expert=2, n_experts=4,
                             expert_rank=4),
        hmoe_ffn=HmoeConfig(d_model=24, heads_per_expert=2, n_experts=4,
                            expert_rank=4),
    )


def cmd_demo_forward(args) -> int:
    if args.ckpt and os.path.isdir(args.ckpt) and \
            os.path.exists(os.path.join(args.ckpt, "config.json")):
        config, layers = load_checkpoint(args.ckpt)
    else:
        config = _demo_config()
        layers = init_encoder(config, Rng(args.seed))
        if args.ckpt:
            save_checkpoint(args.ckpt, config, layers)
            print(f"initialized demo checkpoint at {args.ckpt}")
    n = config.n_z + config.n_c
    if args.input:
        state = tensorfile.read_archive(args.input)
        try:
            h_rgb, h_x = state["h_rgb"], state["h_x"]
        except KeyError as exc:
            raise TensorFileError(f"input archive missing {exc} tensor")
    else:
        # inputs come from their own stream so a reloaded checkpoint sees
        # the same draws as the run that created it
        in_rng = Rng(args.seed + 1)
        h_rgb = in_rng.normal(0.0, 1.0, (n, config.d_model))
        h_x = in_rng.normal(0.0, 1.0, (n, config.d_model))
    stream = DualStream(h_rgb=h_rgb, h_x=h_x, n_z=config.n_z, n_c=config.n_c)
    out = encoder_forward(config, layers, stream)
    tensors = {
        "fused_candidate": out.fused_candidate,
        "final_rgb": out.final_rgb,
        "final_x": out.final_x,
    }
    for i, (m_rgb, m_x) in enumerate(out.layer_maps):
        tensors[f"layer{i}.maps_rgb"] = m_rgb
        tensors[f"layer{i}.maps_x"] = m_x
    if out.layer_maps:
        tensors["maps_rgb"] = out.layer_maps[-1][0]
        tensors["maps_x"] = out.layer_maps[-1][1]
    tensorfile.write_archive(args.out, tensors)
    print(f"wrote {len(tensors)} tensors to {args.out}")
    print(f"fused candidate shape: {out.fused_candidate.shape}")
    return 0


# ----------------------------------------------------------- align metrics

def _load_maps(path: str, key: str) -> list[np.ndarray]:
    if os.path.exists(tensorfile.manifest_path(path)):
        names = sorted(tensorfile.read_manifest(path))
        layered = [n for n in names if n.endswith("." + key)]
        if layered:
            return [tensorfile.read_from_archive(path, n) for n in layered]
        if key not in names:
            raise TensorFileError(f"{path} has no tensor named {key!r}")
        arr = tensorfile.read_from_archive(path, key)
    else:
        arr = tensorfile.read_tensor(path)
    if arr.ndim == 4:
        return [arr[i] for i in range(arr.shape[0])]
    return [arr]


def cmd_align_metrics(args) -> int:
    maps_rgb = _load_maps(args.rgb, args.rgb_key)
    maps_x = _load_maps(args.x, args.x_key)
    stats = alignment_stats(maps_rgb, maps_x)
    rows = [{"layer": i, "cosine": c, "divergence": s}
            for i, (c, s) in enumerate(zip(stats.per_layer_cos,
                                           stats.per_layer_skl))]
    _emit(rows, args)
    print(f"mean cosine: {stats.mean_cos:.6f}")
    print(f"mean divergence: {stats.mean_skl:.6f} (unscaled symmetric KL)")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmfuse",
        description="fusion operators: benchmarks, audits, and verification",
    )
    p.add_argument("--seed", type=int, default=None,
                   help="rng seed (default: MMFUSE_SEED env or 42)")
    p.add_argument("--json", action="store_true", help="rows as JSON lines")
    p.add_argument("--csv", metavar="PATH", help="also write rows to CSV")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="scaling benchmark over token counts")
    b.add_argument("--n-values", default="128,256,512,1024")
    b.add_argument("--d-model", type=int, default=768)
    b.add_argument("--operators", default="hmoe,xattn")
    b.add_argument("--samples", type=int, default=30)
    b.add_argument("--warmups", type=int, default=5)
    b.add_argument("--dtype", default="float32")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("sweep", help="time one operator along one axis")
    s.add_argument("axis", choices=bench_mod.SWEEP_AXES)
    s.add_argument("values", help="comma separated values")
    s.add_argument("--d-model", type=int, default=768)
    s.add_argument("--samples", type=int, default=15)
    s.add_argument("--warmups", type=int, default=3)
    s.add_argument("--dtype", default="float32")
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("audit", help="parameter and MAC accounting")
    a.add_argument("--n-z", type=int, default=64)
    a.add_argument("--n-c", type=int, default=256)
    a.add_argument("--insert-every", type=int, default=2)
    a.add_argument("--lora-rank", type=int, default=8)
    a.set_defaults(fn=cmd_audit)

    o = sub.add_parser("oracle", help="fast paths against loop references")
    o.add_argument("--configs", type=int, default=100)
    o.add_argument("--tol", type=float, default=1e-11)
    o.set_defaults(fn=cmd_oracle)

    g = sub.add_parser("gradcheck", help="analytic against finite differences")
    g.add_argument("--configs", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("demo-forward", help="run the encoder, save outputs")
    d.add_argument("--ckpt", help="checkpoint directory (created if missing)")
    d.add_argument("--input", help="archive with h_rgb and h_x tensors")
    d.add_argument("--out", default="demo_out.bin")
    d.set_defaults(fn=cmd_demo_forward)

    m = sub.add_parser("align-metrics", help="map alignment statistics")
    m.add_argument("--rgb", required=True, help="tensor file or archive")
    m.add_argument("--x", required=True, help="tensor file or archive")
    m.add_argument("--rgb-key", default="maps_rgb")
    m.add_argument("--x-key", default="maps_x")
    m.set_defaults(fn=cmd_align_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is None:
            args.seed = _env_seed()
        return args.fn(args)
    except (ConfigError, TensorFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    main()
