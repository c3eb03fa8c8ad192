"""Dual-stream attention with low-rank key/value adapters and guided map blending.

One layer holds frozen query/key/value projections shared by both modality
streams, rank-r adapter factor pairs on the key and value projections, and a
pair of learnable guidance scalars that blend the two streams' pre-softmax
attention maps into each other.  Backward passes are written out by hand;
frozen projections never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ConfigError, DimensionError, StateError
from .tensor import Rng, matmul, softmax, xavier_init

SCALE_MODES = ("per_head", "full_dim")


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    rank: int = 8
    w_init: float = 1.0
    scale_mode: str = "per_head"

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError(f"d_model={self.d_model}, n_heads={self.n_heads} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.rank < self.d_model:
            raise ConfigError(f"rank {self.rank} outside [1, d_model) for d_model {self.d_model}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"scale_mode {self.scale_mode!r} not in {SCALE_MODES}")
        if not np.isfinite(self.w_init):
            raise ConfigError("w_init must be finite")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def scale(self) -> float:
        d = self.d_head if self.scale_mode == "per_head" else self.d_model
        return 1.0 / float(np.sqrt(d))


@dataclass
class DualStream:
    """Token matrices for the color stream and the auxiliary-modality stream.

    Rows 0..n_z-1 are template tokens, the remaining n_c rows are candidate
    (search-region) tokens.  Both streams share one geometry.
    """

    h_rgb: np.ndarray
    h_x: np.ndarray
    n_z: int
    n_c: int

    def __post_init__(self):
        if self.h_rgb.ndim != 2 or self.h_x.ndim != 2:
            raise DimensionError("stream token matrices must be rank-2")
        if self.h_rgb.shape != self.h_x.shape:
            raise DimensionError(
                f"stream shapes differ: {self.h_rgb.shape} vs {self.h_x.shape}"
            )
        if self.h_rgb.dtype != self.h_x.dtype:
            raise DimensionError("streams must share a dtype")
        if self.n_z < 1 or self.n_c < 1:
            raise DimensionError(f"n_z={self.n_z}, n_c={self.n_c} must be positive")
        if self.n_z + self.n_c != self.h_rgb.shape[0]:
            raise DimensionError(
                f"n_z + n_c = {self.n_z + self.n_c} but streams have {self.h_rgb.shape[0]} rows"
            )

    @property
    def n_tokens(self) -> int:
        return self.h_rgb.shape[0]


@dataclass
class AlignedAttentionLayer:
    config: AttentionConfig
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    ak: np.ndarray
    bk: np.ndarray
    av: np.ndarray
    bv: np.ndarray
    w_x: float
    w_rgb: float

    @property
    def dtype(self):
        return self.wq.dtype


@dataclass
class MergedAttentionLayer:
    """Inference form: adapters folded into the key/value projections."""

    config: AttentionConfig
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w_x: float
    w_rgb: float


def init_aligned_attention(config: AttentionConfig, rng: Rng, dtype=np.float64) -> AlignedAttentionLayer:
    d, r = config.d_model, config.rank
    return AlignedAttentionLayer(
        config=config,
        wq=xavier_init(rng, (d, d), dtype=dtype),
        wk=xavier_init(rng, (d, d), dtype=dtype),
        wv=xavier_init(rng, (d, d), dtype=dtype),
        ak=xavier_init(rng, (d, r), dtype=dtype),
        # zero second factors make a fresh adapter the identity contribution
        bk=np.zeros((r, d), dtype=dtype),
        av=xavier_init(rng, (d, r), dtype=dtype),
        bv=np.zeros((r, d), dtype=dtype),
        w_x=float(config.w_init),
        w_rgb=float(config.w_init),
    )


def _heads(x: np.ndarray, n_heads: int) -> list[np.ndarray]:
    d_head = x.shape[1] // n_heads
    return [x[:, i * d_head:(i + 1) * d_head] for i in range(n_heads)]


def _scores(q: np.ndarray, k: np.ndarray, config: AttentionConfig) -> np.ndarray:
    """Stacked per-head scaled dot products, shape (n_heads, N, N)."""
    s = config.scale()
    return np.stack(
        [tensor.scale(matmul(qh, np.ascontiguousarray(kh.T)), s)
         for qh, kh in zip(_heads(q, config.n_heads), _heads(k, config.n_heads))]
    )


def _combine(probs: np.ndarray, v: np.ndarray, config: AttentionConfig) -> np.ndarray:
    parts = [matmul(probs[i], vh) for i, vh in enumerate(_heads(v, config.n_heads))]
    return np.concatenate(parts, axis=1)


def _adapted(h: np.ndarray, w: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # frozen projection plus the low-rank bypass, kept as two explicit matmuls
    return matmul(h, w) + matmul(matmul(h, a), b)


def guided_blend(own: np.ndarray, other: np.ndarray, w: float) -> np.ndarray:
    """own + w * (other - own), exact at the three published anchor weights.

    w = 0, 1/2, and 1 are the initialization anchors; those branches use
    algebraically identical forms that are also exact in float arithmetic
    (the open-form fused expression drifts by 1 ulp on ~a third of entries).
    """
    if own.shape != other.shape:
        raise DimensionError(f"map shapes differ: {own.shape} vs {other.shape}")
    if w == 0.0:
        return own.copy()
    if w == 1.0:
        return other.copy()
    if w == 0.5:
        return 0.5 * (own + other)
    return own + own.dtype.type(w) * (other - own)


def align_attention_maps(layer: AlignedAttentionLayer, maps_rgb: np.ndarray, maps_x: np.ndarray):
    """Blend each stream's raw maps toward the other stream's, both from the originals."""
    aligned_rgb = guided_blend(maps_rgb, maps_x, layer.w_x)
    aligned_x = guided_blend(maps_x, maps_rgb, layer.w_rgb)
    return aligned_rgb, aligned_x


def raw_attention_maps(layer: AlignedAttentionLayer, stream: DualStream):
    """Pre-softmax per-head score maps for both streams, before any blending."""
    cfg = layer.config
    if stream.h_rgb.shape[1] != cfg.d_model:
        raise DimensionError(
            f"stream width {stream.h_rgb.shape[1]} != d_model {cfg.d_model}"
        )
    maps = []
    for h in (stream.h_rgb, stream.h_x):
        q = matmul(h, layer.wq)
        k = _adapted(h, layer.wk, layer.ak, layer.bk)
        maps.append(_scores(q, k, cfg))
    return maps[0], maps[1]


@dataclass
class AttentionCache:
    stream: DualStream
    q_rgb: np.ndarray
    q_x: np.ndarray
    k_rgb: np.ndarray
    k_x: np.ndarray
    v_rgb: np.ndarray
    v_x: np.ndarray
    raw_rgb: np.ndarray
    raw_x: np.ndarray
    probs_rgb: np.ndarray
    probs_x: np.ndarray


@dataclass
class AttentionGrads:
    """Gradients for adapter factors, guidance scalars, and input tokens.

    Frozen projection gradients are structurally absent: there are no fields
    for them.
    """

    ak: np.ndarray
    bk: np.ndarray
    av: np.ndarray
    bv: np.ndarray
    w_x: float
    w_rgb: float
    h_rgb: np.ndarray
    h_x: np.ndarray


def attention_forward(layer: AlignedAttentionLayer, stream: DualStream):
    """Full guided-attention pass for both streams.

    Returns (out_rgb, out_x, cache); the cache carries every intermediate the
    hand-written backward needs.
    """
    cfg = layer.config
    if stream.h_rgb.shape[1] != cfg.d_model:
        raise DimensionError(
            f"stream width {stream.h_rgb.shape[1]} != d_model {cfg.d_model}"
        )
    q_rgb = matmul(stream.h_rgb, layer.wq)
    q_x = matmul(stream.h_x, layer.wq)
    k_rgb = _adapted(stream.h_rgb, layer.wk, layer.ak, layer.bk)
    k_x = _adapted(stream.h_x, layer.wk, layer.ak, layer.bk)
    v_rgb = _adapted(stream.h_rgb, layer.wv, layer.av, layer.bv)
    v_x = _adapted(stream.h_x, layer.wv, layer.av, layer.bv)
    raw_rgb = _scores(q_rgb, k_rgb, cfg)
    raw_x = _scores(q_x, k_x, cfg)
    aligned_rgb, aligned_x = align_attention_maps(layer, raw_rgb, raw_x)
    probs_rgb = softmax(aligned_rgb, axis=-1)
    probs_x = softmax(aligned_x, axis=-1)
    out_rgb = _combine(probs_rgb, v_rgb, cfg)
    out_x = _combine(probs_x, v_x, cfg)
    cache = AttentionCache(
        stream=stream,
        q_rgb=q_rgb, q_x=q_x,
        k_rgb=k_rgb, k_x=k_x,
        v_rgb=v_rgb, v_x=v_x,
        raw_rgb=raw_rgb, raw_x=raw_x,
        probs_rgb=probs_rgb, probs_x=probs_x,
    )
    return out_rgb, out_x, cache


def _softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    # rows of probs are softmax outputs; standard Jacobian-vector product
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def attention_backward(layer: AlignedAttentionLayer, cache: AttentionCache,
                       grad_out_rgb: np.ndarray, grad_out_x: np.ndarray) -> AttentionGrads:
    cfg = layer.config
    n, d = cache.stream.h_rgb.shape
    for g in (grad_out_rgb, grad_out_x):
        if g.shape != (n, d):
            raise StateError(f"upstream grad shape {g.shape} does not match cached ({n}, {d})")
    if cache.probs_rgb.shape != (cfg.n_heads, n, n):
        raise StateError("cache does not match layer head count")
    s = cfg.scale()

    d_q = {}
    d_k = {}
    d_v = {}
    d_scores = {}
    for name, g, probs, v in (
        ("rgb", grad_out_rgb, cache.probs_rgb, cache.v_rgb),
        ("x", grad_out_x, cache.probs_x, cache.v_x),
    ):
        g_heads = _heads(g, cfg.n_heads)
        v_heads = _heads(v, cfg.n_heads)
        d_probs = np.stack(
            [matmul(gh, np.ascontiguousarray(vh.T)) for gh, vh in zip(g_heads, v_heads)]
        )
        d_v[name] = np.concatenate(
            [matmul(np.ascontiguousarray(probs[i].T), gh) for i, gh in enumerate(g_heads)],
            axis=1,
        )
        d_scores[name] = _softmax_backward(probs, d_probs)

    # blend backward: both aligned maps read both raw maps
    w_x, w_rgb = layer.w_x, layer.w_rgb
    diff = cache.raw_x - cache.raw_rgb
    d_w_x = float(np.sum(d_scores["rgb"] * diff))
    d_w_rgb = float(np.sum(d_scores["x"] * (-diff)))
    d_raw_rgb = (1.0 - w_x) * d_scores["rgb"] + w_rgb * d_scores["x"]
    d_raw_x = w_x * d_scores["rgb"] + (1.0 - w_rgb) * d_scores["x"]

    for name, d_raw, q, k in (
        ("rgb", d_raw_rgb, cache.q_rgb, cache.k_rgb),
        ("x", d_raw_x, cache.q_x, cache.k_x),
    ):
        q_heads = _heads(q, cfg.n_heads)
        k_heads = _heads(k, cfg.n_heads)
        d_q[name] = np.concatenate(
            [tensor.scale(matmul(d_raw[i], kh), s) for i, kh in enumerate(k_heads)], axis=1
        )
        d_k[name] = np.concatenate(
            [tensor.scale(matmul(np.ascontiguousarray(d_raw[i].T), qh), s)
             for i, qh in enumerate(q_heads)],
            axis=1,
        )

    dtype = layer.wq.dtype
    d_ak = np.zeros_like(layer.ak)
    d_bk = np.zeros_like(layer.bk)
    d_av = np.zeros_like(layer.av)
    d_bv = np.zeros_like(layer.bv)
    d_h = {}
    wk_eff = layer.wk + matmul(layer.ak, layer.bk)
    wv_eff = layer.wv + matmul(layer.av, layer.bv)
    for name, h in (("rgb", cache.stream.h_rgb), ("x", cache.stream.h_x)):
        ht = np.ascontiguousarray(h.T)
        # adapter grads accumulate from both streams: factors are shared
        d_ak += matmul(ht, matmul(d_k[name], np.ascontiguousarray(layer.bk.T)))
        d_bk += matmul(np.ascontiguousarray(matmul(h, layer.ak).T), d_k[name])
        d_av += matmul(ht, matmul(d_v[name], np.ascontiguousarray(layer.bv.T)))
        d_bv += matmul(np.ascontiguousarray(matmul(h, layer.av).T), d_v[name])
        d_h[name] = (
            matmul(d_q[name], np.ascontiguousarray(layer.wq.T))
            + matmul(d_k[name], np.ascontiguousarray(wk_eff.T))
            + matmul(d_v[name], np.ascontiguousarray(wv_eff.T))
        )

    return AttentionGrads(
        ak=d_ak.astype(dtype), bk=d_bk.astype(dtype),
        av=d_av.astype(dtype), bv=d_bv.astype(dtype),
        w_x=d_w_x, w_rgb=d_w_rgb,
        h_rgb=d_h["rgb"], h_x=d_h["x"],
    )


def merge_lora(layer: AlignedAttentionLayer) -> MergedAttentionLayer:
    """Fold adapter products into the frozen projections for inference."""
    return MergedAttentionLayer(
        config=layer.config,
        wq=layer.wq.copy(),
        wk=layer.wk + matmul(layer.ak, layer.bk),
        wv=layer.wv + matmul(layer.av, layer.bv),
        w_x=layer.w_x,
        w_rgb=layer.w_rgb,
    )


def merged_attention_forward(layer: MergedAttentionLayer, stream: DualStream):
    cfg = layer.config
    outs = {}
    qs, ks, vs = {}, {}, {}
    for name, h in (("rgb", stream.h_rgb), ("x", stream.h_x)):
        qs[name] = matmul(h, layer.wq)
        ks[name] = matmul(h, layer.wk)
        vs[name] = matmul(h, layer.wv)
    raw = {name: _scores(qs[name], ks[name], cfg) for name in ("rgb", "x")}
    aligned_rgb = guided_blend(raw["rgb"], raw["x"], layer.w_x)
    aligned_x = guided_blend(raw["x"], raw["rgb"], layer.w_rgb)
    outs["rgb"] = _combine(softmax(aligned_rgb, axis=-1), vs["rgb"], cfg)
    outs["x"] = _combine(softmax(aligned_x, axis=-1), vs["x"], cfg)
    return outs["rgb"], outs["x"]


def plain_attention_forward(wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                            config: AttentionConfig, h: np.ndarray):
    """Frozen single-stream attention; also returns the pre-softmax maps."""
    q = matmul(h, wq)
    k = matmul(h, wk)
    v = matmul(h, wv)
    raw = _scores(q, k, config)
    out = _combine(softmax(raw, axis=-1), v, config)
    return out, raw


# archive keys for one layer's tensors; scalars ride as shape-(1,) records
def layer_state(layer: AlignedAttentionLayer, prefix: str = "") -> dict[str, np.ndarray]:
    dt = layer.dtype
    return {
        prefix + "wq": layer.wq, prefix + "wk": layer.wk, prefix + "wv": layer.wv,
        prefix + "ak": layer.ak, prefix + "bk": layer.bk,
        prefix + "av": layer.av, prefix + "bv": layer.bv,
        prefix + "w_x": np.array([layer.w_x], dtype=dt),
        prefix + "w_rgb": np.array([layer.w_rgb], dtype=dt),
    }


def layer_from_state(config: AttentionConfig, state: dict[str, np.ndarray],
                     prefix: str = "") -> AlignedAttentionLayer:
    get = lambda k: state[prefix + k]
    return AlignedAttentionLayer(
        config=config,
        wq=get("wq"), wk=get("wk"), wv=get("wv"),
        ak=get("ak"), bk=get("bk"), av=get("av"), bv=get("bv"),
        w_x=float(get("w_x")[0]), w_rgb=float(get("w_rgb")[0]),
    )
