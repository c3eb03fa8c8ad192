"""Alternative fusion operators used for scaling and locality comparisons.

Two stand-ins bracket the mixer: dense bidirectional cross-attention over all
token pairs (quadratic in token count, global) and a per-position channel
bottleneck (linear, strictly local).  The locality probe perturbs one position
and records which output positions move at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import gelu
from .errors import DimensionError
from .hmoe import HmoeLayer, hmoe_forward
from .tensor import Rng, matmul, softmax, xavier_init


def cross_attention_fuse(h_rgb: np.ndarray, h_x: np.ndarray):
    """Single-head projection-free cross attention, both directions."""
    if h_rgb.shape != h_x.shape:
        raise DimensionError(f"stream shapes differ: {h_rgb.shape} vs {h_x.shape}")
    d = h_rgb.shape[1]
    s = h_rgb.dtype.type(1.0 / np.sqrt(d))
    scores = matmul(h_rgb, np.ascontiguousarray(h_x.T)) * s
    p_rgb = softmax(scores, axis=1)
    out_rgb = h_rgb + matmul(p_rgb, h_x)
    p_x = softmax(np.ascontiguousarray(scores.T), axis=1)
    out_x = h_x + matmul(p_x, h_rgb)
    return out_rgb, out_x


def xattn_mac_count(n_tokens: int, d_model: int) -> int:
    # one score matrix, two attention-weighted sums
    return 3 * n_tokens * n_tokens * d_model


@dataclass
class LocalMlpFuser:
    w1: np.ndarray   # (2*d, bottleneck)
    w2: np.ndarray   # (bottleneck, 2*d)

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[1]


def init_local_mlp(d_model: int, rng: Rng, dtype=np.float64,
                   bottleneck: int | None = None) -> LocalMlpFuser:
    if bottleneck is None:
        bottleneck = max(1, d_model // 8)
    return LocalMlpFuser(
        w1=xavier_init(rng, (2 * d_model, bottleneck), dtype=dtype),
        w2=xavier_init(rng, (bottleneck, 2 * d_model), dtype=dtype),
    )


def local_mlp_fuse(fuser: LocalMlpFuser, h_rgb: np.ndarray, h_x: np.ndarray):
    """Per-position bottleneck mixing; no information crosses positions."""
    if h_rgb.shape != h_x.shape:
        raise DimensionError(f"stream shapes differ: {h_rgb.shape} vs {h_x.shape}")
    d = h_rgb.shape[1]
    joined = np.concatenate([h_rgb, h_x], axis=1)
    y = matmul(gelu(matmul(joined, fuser.w1)), fuser.w2)
    return h_rgb + y[:, :d], h_x + y[:, d:]


def local_mlp_mac_count(n_tokens: int, d_model: int, bottleneck: int) -> int:
    return 4 * n_tokens * d_model * bottleneck


def hmoe_fuse(layer: HmoeLayer, h_rgb: np.ndarray, h_x: np.ndarray):
    """Mixer applied to the joined token set, update split back per stream."""
    n = h_rgb.shape[0]
    joined = np.concatenate([h_rgb, h_x], axis=0)
    y, _ = hmoe_forward(layer, joined)
    return h_rgb + y[:n], h_x + y[n:]


# ------------------------------------------------------------ locality probe

def changed_positions(before, after_rgb, after_x) -> list[int]:
    out = []
    b_rgb, b_x = before
    for row in range(b_rgb.shape[0]):
        if np.any(after_rgb[row] != b_rgb[row]) or np.any(after_x[row] != b_x[row]):
            out.append(row)
    return out


def locality_probe(fuse, h_rgb: np.ndarray, h_x: np.ndarray, position: int,
                   delta: float = 0.75) -> dict:
    """Bump one input position in one stream; report which outputs move.

    A strictly position-local operator can only move the bumped position.
    Detection is bitwise, so unrelated positions of a local operator report
    exactly no change.
    """
    base = fuse(h_rgb, h_x)
    bumped = h_rgb.copy()
    bumped[position] += delta
    after_rgb, after_x = fuse(bumped, h_x)
    moved = changed_positions(base, after_rgb, after_x)
    return {
        "position": position,
        "changed": moved,
        "local": set(moved) <= {position},
    }


def locality_suite(seed: int = 0, n_configs: int = 20) -> dict:
    """Runs the probe for all three operators over random configurations."""
    from .hmoe import HmoeConfig, init_hmoe

    rows = []
    for i in range(n_configs):
        rng = Rng(seed * 41017 + i)
        h = int(rng.choice([1, 2]))
        d = h * int(rng.choice([4, 6, 8]))
        n = int(rng.integers(3, 9))
        pos = int(rng.integers(0, n))
        h_rgb = rng.normal(0.0, 1.0, (n, d))
        h_x = rng.normal(0.0, 1.0, (n, d))

        mixer = init_hmoe(HmoeConfig(
            d_model=d, heads_per_expert=h,
            n_experts=int(rng.integers(2, 5)), expert_rank=1), rng)
        mlp = init_local_mlp(d, rng)

        probes = {
            "hmoe": locality_probe(lambda a, b: hmoe_fuse(mixer, a, b), h_rgb, h_x, pos),
            "xattn": locality_probe(cross_attention_fuse, h_rgb, h_x, pos),
            "mcp_local": locality_probe(lambda a, b: local_mlp_fuse(mlp, a, b), h_rgb, h_x, pos),
        }
        rows.append({
            "detail": f"d={d} h={h} n={n} pos={pos}",
            "local": {k: p["local"] for k, p in probes.items()},
            "changed": {k: p["changed"] for k, p in probes.items()},
        })
    return {
        "rows": rows,
        "n_configs": n_configs,
        "mcp_always_local": all(r["local"]["mcp_local"] for r in rows),
        "hmoe_ever_local": any(r["local"]["hmoe"] for r in rows),
        "xattn_ever_local": any(r["local"]["xattn"] for r in rows),
    }
