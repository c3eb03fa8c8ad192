"""Single-thread wall-clock benchmarks for the fusion operators.

Timing on a shared machine drifts, so the harness interleaves all timed
configurations round-robin within every sampling round instead of finishing
one configuration before starting the next; ambient slowdowns then land on
every configuration roughly equally and cancel out of slope fits.  Each
sample is an inner loop calibrated to run at least a couple of milliseconds,
and the reported statistic is the median with its interquartile range.
BLAS thread pools are pinned to one thread for the whole timed region.
"""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionConfig, DualStream, attention_forward, init_aligned_attention
from .comparators import (
    cross_attention_fuse,
    init_local_mlp,
    local_mlp_fuse,
    local_mlp_mac_count,
    xattn_mac_count,
)
from .errors import ConfigError
from .hmoe import HmoeConfig, hmoe_block_param_count, hmoe_forward, hmoe_mac_count, init_hmoe
from .tensor import Rng

MIN_SAMPLE_S = 0.002
MAX_INNER = 100_000
UNRELIABLE_IQR_FRACTION = 0.15


@dataclass
class BenchReport:
    operator: str
    detail: str
    n_tokens: int
    d_model: int
    dtype: str
    macs: int
    params: int
    median_s: float
    iqr_s: float
    inner_reps: int
    n_samples: int
    warmups: int
    seed: int
    timestamp: str
    unreliable: bool

    @property
    def gflops(self) -> float:
        # two floating ops per multiply-accumulate
        return 2.0 * self.macs / self.median_s / 1e9 if self.median_s > 0 else 0.0


@dataclass
class _Entry:
    key: tuple
    fn: object
    macs: int
    params: int
    n_tokens: int
    detail: str
    inner: int = 1
    samples: list = field(default_factory=list)


def _calibrate(fn, min_sample_s: float) -> int:
    t0 = time.perf_counter()
    fn()
    dt = time.perf_counter() - t0
    if dt <= 0:
        return MAX_INNER
    return max(1, min(MAX_INNER, int(math.ceil(min_sample_s / dt))))


def _run_interleaved(entries: list[_Entry], n_samples: int, warmups: int,
                     min_sample_s: float) -> None:
    with threadpool_limits(limits=1):
        for e in entries:
            e.inner = _calibrate(e.fn, min_sample_s)
        for _ in range(warmups):
            for e in entries:
                for _ in range(e.inner):
                    e.fn()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(n_samples):
                for e in entries:
                    t0 = time.perf_counter()
                    for _ in range(e.inner):
                        e.fn()
                    e.samples.append((time.perf_counter() - t0) / e.inner)
        finally:
            if gc_was_enabled:
                gc.enable()


def _stats(samples: list[float]) -> tuple[float, float]:
    arr = np.asarray(samples)
    med = float(np.median(arr))
    iqr = float(np.percentile(arr, 75) - np.percentile(arr, 25))
    return med, iqr


def _finish(e: _Entry, operator: str, d_model: int, dtype, n_samples: int,
            warmups: int, seed: int) -> BenchReport:
    med, iqr = _stats(e.samples)
    return BenchReport(
        operator=operator, detail=e.detail, n_tokens=e.n_tokens,
        d_model=d_model, dtype=np.dtype(dtype).name, macs=e.macs,
        params=e.params, median_s=med, iqr_s=iqr, inner_reps=e.inner,
        n_samples=n_samples, warmups=warmups, seed=seed,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
        unreliable=med > 0 and iqr / med > UNRELIABLE_IQR_FRACTION,
    )


def fit_scaling_slope(n_values, medians) -> float:
    logt = np.log(np.asarray(medians, dtype=np.float64))
    logn = np.log(np.asarray(n_values, dtype=np.float64))
    return float(np.polyfit(logn, logt, 1)[0])


def _scaling_entry(operator: str, n: int, d_model: int, dtype, rng: Rng) -> _Entry:
    if operator == "hmoe":
        cfg = HmoeConfig(d_model=d_model, heads_per_expert=2, n_experts=4,
                         expert_rank=4)
        layer = init_hmoe(cfg, rng, dtype=dtype)
        x = rng.normal(0.0, 1.0, (n, d_model)).astype(dtype)
        return _Entry(key=(operator, n), fn=lambda: hmoe_forward(layer, x),
                      macs=hmoe_mac_count(cfg, n),
                      params=hmoe_block_param_count(cfg), n_tokens=n,
                      detail=f"e=4 h=2 r=4 n={n}")
    if operator == "xattn":
        a = rng.normal(0.0, 1.0, (n, d_model)).astype(dtype)
        b = rng.normal(0.0, 1.0, (n, d_model)).astype(dtype)
        return _Entry(key=(operator, n), fn=lambda: cross_attention_fuse(a, b),
                      macs=xattn_mac_count(n, d_model), params=0, n_tokens=n,
                      detail=f"dense pairwise n={n}")
    if operator == "mcp_local":
        fuser = init_local_mlp(d_model, rng, dtype=dtype)
        a = rng.normal(0.0, 1.0, (n, d_model)).astype(dtype)
        b = rng.normal(0.0, 1.0, (n, d_model)).astype(dtype)
        return _Entry(key=(operator, n),
                      fn=lambda: local_mlp_fuse(fuser, a, b),
                      macs=local_mlp_mac_count(n, d_model, fuser.bottleneck),
                      params=fuser.w1.size + fuser.w2.size, n_tokens=n,
                      detail=f"bottleneck={fuser.bottleneck} n={n}")
    raise ConfigError(f"unknown operator {operator!r}")


def bench_fusion_scaling(n_values=(128, 256, 512, 1024), d_model: int = 768,
                         operators=("hmoe", "xattn"), seed: int = 42,
                         dtype=np.float32, n_samples: int = 30,
                         warmups: int = 5,
                         min_sample_s: float = MIN_SAMPLE_S) -> dict:
    """Times every operator at every token count, interleaved, and fits slopes."""
    n_values = [int(n) for n in n_values]
    if len(n_values) < 3:
        raise ConfigError(f"need at least 3 token counts, got {n_values}")
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ConfigError(f"token counts must increase strictly: {n_values}")
    if n_samples < 5:
        raise ConfigError(f"n_samples {n_samples} too small to take quartiles")
    rng = Rng(seed)
    entries = [_scaling_entry(op, n, d_model, dtype, rng)
               for n in n_values for op in operators]
    _run_interleaved(entries, n_samples, warmups, min_sample_s)
    reports = [_finish(e, e.key[0], d_model, dtype, n_samples, warmups, seed)
               for e in entries]
    by_op = {op: sorted([r for r in reports if r.operator == op],
                        key=lambda r: r.n_tokens) for op in operators}
    slopes = {op: fit_scaling_slope([r.n_tokens for r in rs],
                                    [r.median_s for r in rs])
              for op, rs in by_op.items()}
    ratios = {}
    if "hmoe" in by_op and "xattn" in by_op:
        for rh, rx in zip(by_op["hmoe"], by_op["xattn"]):
            ratios[rh.n_tokens] = rx.median_s / rh.median_s
    return {
        "reports": reports,
        "slopes": slopes,
        "xattn_over_hmoe": ratios,
        "n_values": n_values,
        "d_model": d_model,
        "any_unreliable": any(r.unreliable for r in reports),
    }


# ------------------------------------------------------------------- sweeps

SWEEP_AXES = ("heads", "experts", "lora_rank", "hmoe_rank", "w_init",
              "weight_type")

SWEEP_FOOTER = ("throughput and size only; quality metrics require trained "
                "checkpoints, which this tool does not produce")


def _attention_entry(detail: str, key, cfg: AttentionConfig, n_z: int,
                     n_c: int, dtype, rng: Rng) -> _Entry:
    layer = init_aligned_attention(cfg, rng, dtype=dtype)
    n = n_z + n_c
    stream = DualStream(h_rgb=rng.normal(0.0, 1.0, (n, cfg.d_model)).astype(dtype),
                        h_x=rng.normal(0.0, 1.0, (n, cfg.d_model)).astype(dtype),
                        n_z=n_z, n_c=n_c)
    d, r = cfg.d_model, cfg.rank
    macs = 2 * (3 * n * d * d + 4 * n * d * r + 2 * n * n * d)
    return _Entry(key=key, fn=lambda: attention_forward(layer, stream),
                  macs=macs, params=4 * d * r + 2, n_tokens=n, detail=detail)


def _mixer_entry(detail: str, key, cfg: HmoeConfig, n_tokens: int, dtype,
                 rng: Rng) -> _Entry:
    layer = init_hmoe(cfg, rng, dtype=dtype)
    x = rng.normal(0.0, 1.0, (n_tokens, cfg.d_model)).astype(dtype)
    return _Entry(key=key, fn=lambda: hmoe_forward(layer, x),
                  macs=hmoe_mac_count(cfg, n_tokens),
                  params=hmoe_block_param_count(cfg), n_tokens=n_tokens,
                  detail=detail)


def sweep_axis(axis: str, values, d_model: int = 768, n_z: int = 64,
               n_c: int = 256, seed: int = 42, dtype=np.float32,
               n_samples: int = 15, warmups: int = 3,
               min_sample_s: float = MIN_SAMPLE_S) -> dict:
    """Times one operator while a single structural axis varies.

    Rows that fail to build (a head count that does not divide the width, an
    unknown weight type) come back as error rows instead of aborting the
    sweep.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, have {SWEEP_AXES}")
    rng = Rng(seed)
    n_tokens = n_z + n_c
    entries: list[_Entry] = []
    rows: list[dict] = []
    for value in values:
        key = (axis, value)
        try:
            if axis == "heads":
                cfg = AttentionConfig(d_model=d_model, n_heads=int(value))
                entries.append(_attention_entry(f"heads={value}", key, cfg,
                                                n_z, n_c, dtype, rng))
            elif axis == "lora_rank":
                cfg = AttentionConfig(d_model=d_model, n_heads=12,
                                      rank=int(value))
                entries.append(_attention_entry(f"rank={value}", key, cfg,
                                                n_z, n_c, dtype, rng))
            elif axis == "w_init":
                cfg = AttentionConfig(d_model=d_model, n_heads=12,
                                      w_init=float(value))
                entries.append(_attention_entry(f"w_init={value}", key, cfg,
                                                n_z, n_c, dtype, rng))
            elif axis == "weight_type":
                dt = np.dtype(str(value))
                if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
                    raise ConfigError(f"weight_type {value!r} not float32/float64")
                cfg = AttentionConfig(d_model=d_model, n_heads=12)
                entries.append(_attention_entry(f"dtype={dt.name}", key, cfg,
                                                n_z, n_c, dt.type, rng))
            elif axis == "experts":
                cfg = HmoeConfig(d_model=d_model, heads_per_expert=2,
                                 n_experts=int(value), expert_rank=4)
                entries.append(_mixer_entry(f"experts={value}", key, cfg,
                                            n_tokens, dtype, rng))
            elif axis == "hmoe_rank":
                cfg = HmoeConfig(d_model=d_model, heads_per_expert=2,
                                 n_experts=4, expert_rank=int(value))
                entries.append(_mixer_entry(f"expert_rank={value}", key, cfg,
                                            n_tokens, dtype, rng))
        except (ConfigError, TypeError, ValueError) as exc:
            rows.append({"axis": axis, "value": value, "error": str(exc)})
    _run_interleaved(entries, n_samples, warmups, min_sample_s)
    for e in entries:
        rep = _finish(e, e.key[0], d_model, dtype, n_samples, warmups, seed)
        rows.append({
            "axis": axis, "value": e.key[1], "detail": e.detail,
            "params": rep.params, "macs": rep.macs,
            "median_s": rep.median_s, "iqr_s": rep.iqr_s,
            "gflops": rep.gflops, "unreliable": rep.unreliable,
        })
    return {"axis": axis, "rows": rows, "footer": SWEEP_FOOTER}
