"""Hierarchical soft mixture-of-experts token mixer.

Tokens are cut into contiguous channel chunks (sub-tokens), softly mixed into
per-expert-head aggregates by a column-stochastic assignment, transformed by
low-rank experts whose heads share factors, then redistributed to tokens by a
row-stochastic affinity computed from the same assignment logits.  Cost is
linear in the token count; the assignment logits feed both softmaxes, so the
hand-written backward accumulates through both consumers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import Rng, matmul, softmax, xavier_init

PATCH_AGGS = ("sum", "mean")


@dataclass
class HmoeConfig:
    d_model: int
    heads_per_expert: int = 2
    n_experts: int = 4
    expert_rank: int = 4
    patch_agg: str = "sum"

    def __post_init__(self):
        if self.d_model < 1 or self.n_experts < 1 or self.heads_per_expert < 1:
            raise ConfigError(
                f"d_model={self.d_model}, n_experts={self.n_experts}, "
                f"heads_per_expert={self.heads_per_expert} must all be positive"
            )
        if self.d_model % self.heads_per_expert != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads_per_expert {self.heads_per_expert}"
            )
        if not 1 <= self.expert_rank < self.sub_dim:
            raise ConfigError(
                f"expert_rank {self.expert_rank} outside [1, {self.sub_dim}) "
                f"(sub-token width d_model/heads_per_expert)"
            )
        if self.patch_agg not in PATCH_AGGS:
            raise ConfigError(f"patch_agg {self.patch_agg!r} not in {PATCH_AGGS}")

    @property
    def sub_dim(self) -> int:
        return self.d_model // self.heads_per_expert


@dataclass
class HmoeLayer:
    config: HmoeConfig
    phi: np.ndarray        # (sub_dim, n_experts * heads_per_expert)
    expert_a: np.ndarray   # (n_experts, sub_dim, expert_rank), heads share factors
    expert_b: np.ndarray   # (n_experts, expert_rank, sub_dim)
    pre_a: np.ndarray      # (d_model, expert_rank)
    pre_b: np.ndarray      # (expert_rank, d_model)
    post_a: np.ndarray
    post_b: np.ndarray

    @property
    def dtype(self):
        return self.phi.dtype


def init_hmoe(config: HmoeConfig, rng: Rng, dtype=np.float64,
              zero_output: bool = False) -> HmoeLayer:
    """Xavier factors everywhere; zero_output zeroes the final projection factor
    so a fresh layer contributes nothing to its residual stream."""
    ds, e, h, r = config.sub_dim, config.n_experts, config.heads_per_expert, config.expert_rank
    d = config.d_model
    expert_a = np.stack([xavier_init(rng, (ds, r), dtype=dtype) for _ in range(e)])
    expert_b = np.stack([xavier_init(rng, (r, ds), dtype=dtype) for _ in range(e)])
    post_b = np.zeros((r, d), dtype=dtype) if zero_output else xavier_init(rng, (r, d), dtype=dtype)
    return HmoeLayer(
        config=config,
        phi=xavier_init(rng, (ds, e * h), dtype=dtype),
        expert_a=expert_a,
        expert_b=expert_b,
        pre_a=xavier_init(rng, (d, r), dtype=dtype),
        pre_b=xavier_init(rng, (r, d), dtype=dtype),
        post_a=xavier_init(rng, (d, r), dtype=dtype),
        post_b=post_b,
    )


def split_subtokens(config: HmoeConfig, x: np.ndarray) -> np.ndarray:
    """(N, D) -> (N*h, D/h): row i*h+j is token i's j-th contiguous channel chunk."""
    if x.ndim != 2 or x.shape[1] != config.d_model:
        raise DimensionError(f"expected (N, {config.d_model}) tokens, got {x.shape}")
    n = x.shape[0]
    return np.ascontiguousarray(x).reshape(n * config.heads_per_expert, config.sub_dim).copy()


def unsplit_subtokens(config: HmoeConfig, x_split: np.ndarray) -> np.ndarray:
    h = config.heads_per_expert
    if x_split.ndim != 2 or x_split.shape[1] != config.sub_dim or x_split.shape[0] % h:
        raise DimensionError(f"bad sub-token shape {x_split.shape}")
    return np.ascontiguousarray(x_split).reshape(x_split.shape[0] // h, config.d_model).copy()


def mix_subtokens(layer: HmoeLayer, x_split: np.ndarray):
    """Soft assignment of sub-tokens to expert heads.

    Returns (x_mix, logits): x_mix rows are convex combinations over all
    sub-tokens (columns of the assignment are softmax-normalized over the
    sub-token axis), logits are reused downstream for the token affinity.
    """
    cfg = layer.config
    if x_split.ndim != 2 or x_split.shape[1] != cfg.sub_dim:
        raise DimensionError(f"expected (N*h, {cfg.sub_dim}) sub-tokens, got {x_split.shape}")
    logits = matmul(x_split, layer.phi)
    w_col = softmax(logits, axis=0)
    x_mix = matmul(np.ascontiguousarray(w_col.T), x_split)
    return x_mix, logits


def expert_transform(layer: HmoeLayer, x_mix: np.ndarray) -> np.ndarray:
    """Low-rank expert transforms; heads of one expert share factors.

    Head rows of expert i are transformed, channel-concatenated back to width
    D, and passed through the low-rank output projection.
    """
    y_expert, _ = _expert_transform(layer, x_mix)
    return y_expert


def _expert_transform(layer: HmoeLayer, x_mix: np.ndarray):
    cfg = layer.config
    e, h = cfg.n_experts, cfg.heads_per_expert
    if x_mix.shape != (e * h, cfg.sub_dim):
        raise DimensionError(
            f"expected ({e * h}, {cfg.sub_dim}) mixed sub-tokens, got {x_mix.shape}"
        )
    z_mid = []
    head_rows = []
    for i in range(e):
        rows = x_mix[i * h:(i + 1) * h]
        z_i = matmul(rows, layer.expert_a[i])
        z_mid.append(z_i)
        head_rows.append(matmul(z_i, layer.expert_b[i]))
    y_heads = np.concatenate(head_rows, axis=0)
    y_cat = np.ascontiguousarray(y_heads).reshape(e, cfg.d_model).copy()
    z_post = matmul(y_cat, layer.post_a)
    y_expert = matmul(z_post, layer.post_b)
    return y_expert, {
        "z_mid": z_mid, "y_heads": y_heads, "y_cat": y_cat, "z_post": z_post,
    }


def _patchify(config: HmoeConfig, logits: np.ndarray) -> np.ndarray:
    """Aggregate (N*h, e*h) logits over non-overlapping h x h blocks -> (N, e)."""
    h, e = config.heads_per_expert, config.n_experts
    n = logits.shape[0] // h
    m = logits.reshape(n, h, e, h).sum(axis=(1, 3))
    if config.patch_agg == "mean":
        m = m / (h * h)
    return m


def token_affinity(layer: HmoeLayer, logits: np.ndarray) -> np.ndarray:
    """Row-stochastic token-to-expert weights from block-pooled logits."""
    cfg = layer.config
    if logits.ndim != 2 or logits.shape[1] != cfg.n_experts * cfg.heads_per_expert \
            or logits.shape[0] % cfg.heads_per_expert:
        raise DimensionError(f"bad logit shape {logits.shape}")
    return softmax(_patchify(cfg, logits), axis=1)


@dataclass
class HmoeCache:
    x_in: np.ndarray
    u: np.ndarray
    x_pre: np.ndarray
    x_split: np.ndarray
    logits: np.ndarray
    w_col: np.ndarray
    x_mix: np.ndarray
    z_mid: list
    y_cat: np.ndarray
    z_post: np.ndarray
    y_expert: np.ndarray
    affinity: np.ndarray


@dataclass
class HmoeGrads:
    phi: np.ndarray
    expert_a: np.ndarray
    expert_b: np.ndarray
    pre_a: np.ndarray
    pre_b: np.ndarray
    post_a: np.ndarray
    post_b: np.ndarray
    x_in: np.ndarray


def hmoe_forward(layer: HmoeLayer, x_in: np.ndarray):
    """Full mixer pass: project, split, mix, transform, redistribute.

    Returns (y_out, cache) with y_out shaped like x_in.
    """
    cfg = layer.config
    if x_in.ndim != 2 or x_in.shape[1] != cfg.d_model:
        raise DimensionError(f"expected (N, {cfg.d_model}) tokens, got {x_in.shape}")
    u = matmul(x_in, layer.pre_a)
    x_pre = matmul(u, layer.pre_b)
    x_split = split_subtokens(cfg, x_pre)
    logits = matmul(x_split, layer.phi)
    w_col = softmax(logits, axis=0)
    x_mix = matmul(np.ascontiguousarray(w_col.T), x_split)
    y_expert, mids = _expert_transform(layer, x_mix)
    affinity = token_affinity(layer, logits)
    y_out = matmul(affinity, y_expert)
    cache = HmoeCache(
        x_in=x_in, u=u, x_pre=x_pre, x_split=x_split, logits=logits,
        w_col=w_col, x_mix=x_mix, z_mid=mids["z_mid"], y_cat=mids["y_cat"],
        z_post=mids["z_post"], y_expert=y_expert, affinity=affinity,
    )
    return y_out, cache


def _softmax_backward_axis(s: np.ndarray, ds: np.ndarray, axis: int) -> np.ndarray:
    inner = np.sum(ds * s, axis=axis, keepdims=True)
    return s * (ds - inner)


def hmoe_backward(layer: HmoeLayer, cache: HmoeCache, grad_y: np.ndarray) -> HmoeGrads:
    cfg = layer.config
    e, h, ds = cfg.n_experts, cfg.heads_per_expert, cfg.sub_dim
    n = cache.x_in.shape[0]
    if grad_y.shape != cache.x_in.shape:
        raise StateError(f"upstream grad shape {grad_y.shape} != cached input {cache.x_in.shape}")
    if cache.logits.shape != (n * h, e * h):
        raise StateError("cache does not match layer geometry")

    d_affinity = matmul(grad_y, np.ascontiguousarray(cache.y_expert.T))
    d_y_expert = matmul(np.ascontiguousarray(cache.affinity.T), grad_y)
    d_m = _softmax_backward_axis(cache.affinity, d_affinity, axis=1)
    # every logit inside pooled block (i, k) contributed with weight 1 (or 1/h^2)
    d_logits_aff = np.repeat(np.repeat(d_m, h, axis=0).reshape(n * h, e, 1), h, axis=2)
    d_logits_aff = d_logits_aff.reshape(n * h, e * h)
    if cfg.patch_agg == "mean":
        d_logits_aff = d_logits_aff / (h * h)

    d_z_post = matmul(d_y_expert, np.ascontiguousarray(layer.post_b.T))
    d_post_b = matmul(np.ascontiguousarray(cache.z_post.T), d_y_expert)
    d_post_a = matmul(np.ascontiguousarray(cache.y_cat.T), d_z_post)
    d_y_cat = matmul(d_z_post, np.ascontiguousarray(layer.post_a.T))
    d_y_heads = np.ascontiguousarray(d_y_cat).reshape(e * h, ds)

    d_x_mix = np.empty_like(cache.x_mix)
    d_ea = np.zeros_like(layer.expert_a)
    d_eb = np.zeros_like(layer.expert_b)
    for i in range(e):
        rows = slice(i * h, (i + 1) * h)
        d_rows = d_y_heads[rows]
        z_i = cache.z_mid[i]
        d_z = matmul(d_rows, np.ascontiguousarray(layer.expert_b[i].T))
        d_eb[i] = matmul(np.ascontiguousarray(z_i.T), d_rows)
        d_ea[i] = matmul(np.ascontiguousarray(cache.x_mix[rows].T), d_z)
        d_x_mix[rows] = matmul(d_z, np.ascontiguousarray(layer.expert_a[i].T))

    d_w_col = matmul(cache.x_split, np.ascontiguousarray(d_x_mix.T))
    d_x_split = matmul(cache.w_col, d_x_mix)
    d_logits_mix = _softmax_backward_axis(cache.w_col, d_w_col, axis=0)

    # the logits feed both the column assignment and the token affinity
    d_logits = d_logits_mix + d_logits_aff
    d_x_split = d_x_split + matmul(d_logits, np.ascontiguousarray(layer.phi.T))
    d_phi = matmul(np.ascontiguousarray(cache.x_split.T), d_logits)

    d_x_pre = np.ascontiguousarray(d_x_split).reshape(n, cfg.d_model)
    d_pre_b = matmul(np.ascontiguousarray(cache.u.T), d_x_pre)
    d_u = matmul(d_x_pre, np.ascontiguousarray(layer.pre_b.T))
    d_pre_a = matmul(np.ascontiguousarray(cache.x_in.T), d_u)
    d_x_in = matmul(d_u, np.ascontiguousarray(layer.pre_a.T))

    return HmoeGrads(
        phi=d_phi, expert_a=d_ea, expert_b=d_eb,
        pre_a=d_pre_a, pre_b=d_pre_b, post_a=d_post_a, post_b=d_post_b,
        x_in=d_x_in,
    )


def hmoe_block_param_count(config: HmoeConfig) -> int:
    """Learnable scalars in one mixer block."""
    d, ds = config.d_model, config.sub_dim
    e, r = config.n_experts, config.expert_rank
    phi = ds * (e * config.heads_per_expert)
    experts = e * 2 * ds * r
    projs = 2 * (2 * d * r)
    return phi + experts + projs


def hmoe_param_count(attn_side: HmoeConfig, ffn_side: HmoeConfig, n_inserted: int) -> dict:
    """Per-block, per-inserted-layer, and total mixer parameter counts."""
    block_attn = hmoe_block_param_count(attn_side)
    block_ffn = hmoe_block_param_count(ffn_side)
    per_layer = block_attn + block_ffn
    return {
        "block_attn": block_attn,
        "block_ffn": block_ffn,
        "per_layer": per_layer,
        "total": per_layer * n_inserted,
    }


def hmoe_mac_breakdown(config: HmoeConfig, n_tokens: int) -> dict:
    """Analytic multiply-accumulate counts for one forward over n_tokens.

    Matmul MACs only; exponentials and the block-pool additions are reported
    separately.  The assignment softmax touches n*e*h^2 entries, the term that
    dominates asymptotically among the non-matmul work.
    """
    if n_tokens < 1:
        raise DimensionError(f"n_tokens must be positive, got {n_tokens}")
    d, e, h, r = config.d_model, config.n_experts, config.heads_per_expert, config.expert_rank
    n = n_tokens
    macs = {
        "pre_proj": 2 * n * d * r,
        "assignment_logits": n * d * e * h,
        "mixing": n * d * e * h,
        "experts": 2 * e * d * r,
        "post_proj": 2 * e * d * r,
        "combine": n * e * d,
    }
    macs["total"] = sum(macs.values())
    macs["softmax_entries"] = n * e * h * h + n * e
    macs["pool_adds"] = n * e * (h * h - 1)
    return macs


def hmoe_mac_count(config: HmoeConfig, n_tokens: int) -> int:
    return hmoe_mac_breakdown(config, n_tokens)["total"]


# archive keys for one mixer block
def hmoe_state(layer: HmoeLayer, prefix: str = "") -> dict[str, np.ndarray]:
    out = {
        prefix + "phi": layer.phi,
        prefix + "pre.a": layer.pre_a, prefix + "pre.b": layer.pre_b,
        prefix + "post.a": layer.post_a, prefix + "post.b": layer.post_b,
    }
    for i in range(layer.config.n_experts):
        out[prefix + f"expert{i}.a"] = layer.expert_a[i]
        out[prefix + f"expert{i}.b"] = layer.expert_b[i]
    return out


def hmoe_from_state(config: HmoeConfig, state: dict[str, np.ndarray],
                    prefix: str = "") -> HmoeLayer:
    get = lambda k: state[prefix + k]
    e = config.n_experts
    return HmoeLayer(
        config=config,
        phi=get("phi"),
        expert_a=np.stack([get(f"expert{i}.a") for i in range(e)]),
        expert_b=np.stack([get(f"expert{i}.b") for i in range(e)]),
        pre_a=get("pre.a"), pre_b=get("pre.b"),
        post_a=get("post.a"), post_b=get("post.b"),
    )
