"""Slow reference implementations and the equivalence suites built on them.

Every oracle here is written with explicit Python loops and scalar math so it
shares no code path with the fast implementations it checks.  Accumulation
order is sequential over the contraction index, which is the order the fast
float64 matmul commits to as well.  Suites draw random small configurations,
compare fast against oracle elementwise, and report one case per draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    AlignedAttentionLayer,
    AttentionConfig,
    DualStream,
    attention_forward,
    init_aligned_attention,
)
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .hmoe import HmoeConfig, hmoe_forward, init_hmoe
from .tensor import Rng

GELU_C = math.sqrt(2.0 / math.pi)


# ------------------------------------------------------------ loop primitives

def oracle_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            acc = out.dtype.type(0.0)
            for t in range(k):
                acc = acc + a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def oracle_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    ax = axis % x.ndim
    out = np.empty_like(x)
    comp = x.shape[:ax] + x.shape[ax + 1:]
    for idx in np.ndindex(comp):
        pre, post = idx[:ax], idx[ax:]
        line = [float(x[pre + (j,) + post]) for j in range(x.shape[ax])]
        m = line[0]
        for v in line[1:]:
            if v > m:
                m = v
        exps = [math.exp(v - m) for v in line]
        s = 0.0
        for v in exps:
            s += v
        for j, e in enumerate(exps):
            out[pre + (j,) + post] = e / s
    return out


def _oracle_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        out[idx] = a[idx] + b[idx]
    return out


def _oracle_scale(x: np.ndarray, s: float) -> np.ndarray:
    out = np.empty_like(x)
    sv = x.dtype.type(s)
    for idx in np.ndindex(x.shape):
        out[idx] = x[idx] * sv
    return out


def _oracle_blend(own: np.ndarray, other: np.ndarray, w: float) -> np.ndarray:
    out = np.empty_like(own)
    wv = own.dtype.type(w)
    for idx in np.ndindex(own.shape):
        if w == 0.0:
            out[idx] = own[idx]
        elif w == 1.0:
            out[idx] = other[idx]
        elif w == 0.5:
            out[idx] = own.dtype.type(0.5) * (own[idx] + other[idx])
        else:
            out[idx] = own[idx] + wv * (other[idx] - own[idx])
    return out


def _oracle_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray,
                       eps: float = 1e-6) -> np.ndarray:
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += float(x[i, j])
        mu /= d
        var = 0.0
        for j in range(d):
            var += (float(x[i, j]) - mu) ** 2
        var /= d
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(d):
            out[i, j] = (float(x[i, j]) - mu) * inv * float(g[j]) + float(b[j])
    return out


def _oracle_gelu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        v = float(x[idx])
        out[idx] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + 0.044715 * v ** 3)))
    return out


# ------------------------------------------------------- attention reference

def oracle_attention_forward(layer: AlignedAttentionLayer, stream: DualStream) -> dict:
    cfg = layer.config
    dh = cfg.d_head
    s = cfg.scale()

    def project(h):
        q = oracle_matmul(h, layer.wq)
        k = _oracle_add(oracle_matmul(h, layer.wk),
                        oracle_matmul(oracle_matmul(h, layer.ak), layer.bk))
        v = _oracle_add(oracle_matmul(h, layer.wv),
                        oracle_matmul(oracle_matmul(h, layer.av), layer.bv))
        return q, k, v

    def raw_maps(q, k):
        maps = np.empty((cfg.n_heads, q.shape[0], k.shape[0]), dtype=q.dtype)
        for h in range(cfg.n_heads):
            qh = q[:, h * dh:(h + 1) * dh]
            kh = k[:, h * dh:(h + 1) * dh]
            maps[h] = _oracle_scale(oracle_matmul(qh, np.ascontiguousarray(kh.T)), s)
        return maps

    q_rgb, k_rgb, v_rgb = project(stream.h_rgb)
    q_x, k_x, v_x = project(stream.h_x)
    raw_rgb = raw_maps(q_rgb, k_rgb)
    raw_x = raw_maps(q_x, k_x)
    aligned_rgb = np.stack([_oracle_blend(raw_rgb[h], raw_x[h], layer.w_x)
                            for h in range(cfg.n_heads)])
    aligned_x = np.stack([_oracle_blend(raw_x[h], raw_rgb[h], layer.w_rgb)
                          for h in range(cfg.n_heads)])
    probs_rgb = oracle_softmax(aligned_rgb, axis=2)
    probs_x = oracle_softmax(aligned_x, axis=2)

    def combine(probs, v):
        cols = []
        for h in range(cfg.n_heads):
            vh = np.ascontiguousarray(v[:, h * dh:(h + 1) * dh])
            cols.append(oracle_matmul(np.ascontiguousarray(probs[h]), vh))
        out = np.empty((probs.shape[1], cfg.d_model), dtype=v.dtype)
        for h, c in enumerate(cols):
            out[:, h * dh:(h + 1) * dh] = c
        return out

    return {
        "out_rgb": combine(probs_rgb, v_rgb),
        "out_x": combine(probs_x, v_x),
        "raw_rgb": raw_rgb, "raw_x": raw_x,
        "aligned_rgb": aligned_rgb, "aligned_x": aligned_x,
        "probs_rgb": probs_rgb, "probs_x": probs_x,
    }


# ----------------------------------------------------------- mixer reference

def oracle_hmoe_forward(layer, x: np.ndarray) -> dict:
    cfg = layer.config
    n, d = x.shape
    h, ds, e = cfg.heads_per_expert, cfg.sub_dim, cfg.n_experts

    u = oracle_matmul(x, layer.pre_a)
    x_pre = oracle_matmul(u, layer.pre_b)
    x_split = np.empty((n * h, ds), dtype=x.dtype)
    for t in range(n):
        for j in range(h):
            for c in range(ds):
                x_split[t * h + j, c] = x_pre[t, j * ds + c]
    logits = oracle_matmul(x_split, layer.phi)
    w_col = oracle_softmax(logits, axis=0)
    x_mix = np.zeros((e * h, ds), dtype=x.dtype)
    for g in range(e * h):
        for c in range(ds):
            acc = x.dtype.type(0.0)
            for sidx in range(n * h):
                acc = acc + w_col[sidx, g] * x_split[sidx, c]
            x_mix[g, c] = acc
    y_cat = np.empty((e, d), dtype=x.dtype)
    for i in range(e):
        rows = np.ascontiguousarray(x_mix[i * h:(i + 1) * h])
        z = oracle_matmul(rows, np.ascontiguousarray(layer.expert_a[i]))
        yh = oracle_matmul(z, np.ascontiguousarray(layer.expert_b[i]))
        for j in range(h):
            for c in range(ds):
                y_cat[i, j * ds + c] = yh[j, c]
    z_post = oracle_matmul(y_cat, layer.post_a)
    y_expert = oracle_matmul(z_post, layer.post_b)
    pooled = np.zeros((n, e), dtype=x.dtype)
    for t in range(n):
        for i in range(e):
            acc = x.dtype.type(0.0)
            for j in range(h):
                for jj in range(h):
                    acc = acc + logits[t * h + j, i * h + jj]
            if cfg.patch_agg == "mean":
                acc = acc / x.dtype.type(h * h)
            pooled[t, i] = acc
    affinity = oracle_softmax(pooled, axis=1)
    y_out = oracle_matmul(affinity, y_expert)
    return {
        "y_out": y_out, "logits": logits, "w_col": w_col, "x_mix": x_mix,
        "y_expert": y_expert, "affinity": affinity,
    }


# --------------------------------------------------------- encoder reference

def oracle_encoder_forward(config: EncoderConfig, layers, stream: DualStream) -> dict:
    """Re-derives the full stack wiring from loop primitives only."""
    attn_cfg = config.attention_config()
    inserted = set(config.inserted_layers())
    h_rgb = stream.h_rgb.copy()
    h_x = stream.h_x.copy()
    n_z = config.n_z

    def plain_attn(layer, h):
        q = oracle_matmul(h, layer.wq)
        k = oracle_matmul(h, layer.wk)
        v = oracle_matmul(h, layer.wv)
        dh = attn_cfg.d_head
        s = attn_cfg.scale()
        out = np.empty((h.shape[0], config.d_model), dtype=h.dtype)
        for hh in range(attn_cfg.n_heads):
            qh = q[:, hh * dh:(hh + 1) * dh]
            kh = k[:, hh * dh:(hh + 1) * dh]
            vh = np.ascontiguousarray(v[:, hh * dh:(hh + 1) * dh])
            raw = _oracle_scale(oracle_matmul(qh, np.ascontiguousarray(kh.T)), s)
            probs = oracle_softmax(raw, axis=1)
            out[:, hh * dh:(hh + 1) * dh] = oracle_matmul(probs, vh)
        return out

    def mixer_group(block, part_rgb, part_x):
        joined = np.concatenate([part_rgb, part_x], axis=0)
        y = oracle_hmoe_forward(block, joined)["y_out"]
        m = part_rgb.shape[0]
        return _oracle_add(part_rgb, y[:m]), _oracle_add(part_x, y[m:])

    def mixer(block, a, b):
        za, zb = mixer_group(block, a[:n_z], b[:n_z])
        ca, cb = mixer_group(block, a[n_z:], b[n_z:])
        return np.concatenate([za, ca], axis=0), np.concatenate([zb, cb], axis=0)

    for i, layer in enumerate(layers):
        a_rgb = _oracle_layer_norm(h_rgb, layer.ln1_g, layer.ln1_b)
        a_x = _oracle_layer_norm(h_x, layer.ln1_g, layer.ln1_b)
        if i in inserted:
            view = layer.aligned_view(attn_cfg)
            res = oracle_attention_forward(
                view, DualStream(h_rgb=a_rgb, h_x=a_x, n_z=n_z, n_c=config.n_c))
            h_rgb = _oracle_add(h_rgb, res["out_rgb"])
            h_x = _oracle_add(h_x, res["out_x"])
            h_rgb, h_x = mixer(layer.hmoe_attn, h_rgb, h_x)
        else:
            h_rgb = _oracle_add(h_rgb, plain_attn(layer, a_rgb))
            h_x = _oracle_add(h_x, plain_attn(layer, a_x))
        f_rgb = _oracle_layer_norm(h_rgb, layer.ln2_g, layer.ln2_b)
        f_x = _oracle_layer_norm(h_x, layer.ln2_g, layer.ln2_b)
        h_rgb = _oracle_add(h_rgb, oracle_matmul(_oracle_gelu(
            oracle_matmul(f_rgb, layer.ffn_w1)), layer.ffn_w2))
        h_x = _oracle_add(h_x, oracle_matmul(_oracle_gelu(
            oracle_matmul(f_x, layer.ffn_w1)), layer.ffn_w2))
        if i in inserted:
            h_rgb, h_x = mixer(layer.hmoe_ffn, h_rgb, h_x)
    fused = _oracle_add(h_rgb[n_z:], h_x[n_z:])
    return {"fused_candidate": fused, "final_rgb": h_rgb, "final_x": h_x}


# ------------------------------------------------------------------- suites

@dataclass
class OracleCase:
    name: str
    detail: str
    error: float
    tolerance: float
    passed: bool


def _diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if a.size else 0.0


def _case(name, detail, pairs, tol) -> OracleCase:
    err = max(_diff(a, b) for a, b in pairs)
    return OracleCase(name=name, detail=detail, error=err, tolerance=tol,
                      passed=err < tol)


def _draw_w(rng: Rng) -> float:
    # anchors show up explicitly so the exact-blend branches get exercised
    roll = rng.uniform(0.0, 1.0)
    if roll < 0.1:
        return 0.0
    if roll < 0.2:
        return 1.0
    if roll < 0.3:
        return 0.5
    return rng.uniform(0.0, 1.0)


def oracle_attention_suite(seed: int = 0, n_configs: int = 100,
                           tol: float = 1e-11) -> list[OracleCase]:
    cases = []
    for i in range(n_configs):
        rng = Rng(seed * 100003 + i)
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([2, 3, 4]))
        d = heads * dh
        rank = int(rng.integers(1, min(4, d)))
        cfg = AttentionConfig(
            d_model=d, n_heads=heads, rank=rank, w_init=_draw_w(rng),
            scale_mode=str(rng.choice(["per_head", "full_dim"])),
        )
        layer = init_aligned_attention(cfg, rng)
        layer.bk = rng.normal(0.0, 0.5, (rank, d))
        layer.bv = rng.normal(0.0, 0.5, (rank, d))
        layer.w_rgb = _draw_w(rng)
        n_z, n_c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stream = DualStream(
            h_rgb=rng.normal(0.0, 1.0, (n_z + n_c, d)),
            h_x=rng.normal(0.0, 1.0, (n_z + n_c, d)),
            n_z=n_z, n_c=n_c,
        )
        out_rgb, out_x, cache = attention_forward(layer, stream)
        ref = oracle_attention_forward(layer, stream)
        detail = (f"d={d} heads={heads} rank={rank} nz={n_z} nc={n_c} "
                  f"w_x={layer.w_x:.3f} w_rgb={layer.w_rgb:.3f} scale={cfg.scale_mode}")
        cases.append(_case("attention", detail, [
            (out_rgb, ref["out_rgb"]), (out_x, ref["out_x"]),
            (cache.raw_rgb, ref["raw_rgb"]), (cache.raw_x, ref["raw_x"]),
            (cache.probs_rgb, ref["probs_rgb"]), (cache.probs_x, ref["probs_x"]),
        ], tol))
    return cases


def oracle_hmoe_suite(seed: int = 0, n_configs: int = 100,
                      tol: float = 1e-11) -> list[OracleCase]:
    cases = []
    for i in range(n_configs):
        rng = Rng(seed * 200003 + i)
        h = int(rng.choice([1, 2, 4]))
        ds = int(rng.choice([2, 3, 4]))
        d = h * ds
        e = int(rng.integers(1, 5))
        r = int(rng.integers(1, ds))
        cfg = HmoeConfig(d_model=d, heads_per_expert=h, n_experts=e,
                         expert_rank=r,
                         patch_agg=str(rng.choice(["sum", "mean"])))
        layer = init_hmoe(cfg, rng)
        n = int(rng.integers(1, 7))
        x = rng.normal(0.0, 1.0, (n, d))
        y, hcache = hmoe_forward(layer, x)
        ref = oracle_hmoe_forward(layer, x)
        detail = (f"d={d} h={h} e={e} r={r} n={n} agg={cfg.patch_agg}")
        cases.append(_case("hmoe", detail, [
            (y, ref["y_out"]), (hcache.logits, ref["logits"]),
            (hcache.w_col, ref["w_col"]), (hcache.x_mix, ref["x_mix"]),
            (hcache.y_expert, ref["y_expert"]),
            (hcache.affinity, ref["affinity"]),
        ], tol))
    return cases


def oracle_tensor_suite(seed: int = 0, n_configs: int = 60,
                        tol: float = 1e-11) -> list[OracleCase]:
    from . import tensor

    cases = []
    for i in range(n_configs):
        rng = Rng(seed * 300007 + i)
        n = int(rng.integers(1, 7))
        k = int(rng.integers(1, 7))
        m = int(rng.integers(1, 7))
        a = rng.normal(0.0, 1.0, (n, k))
        b = rng.normal(0.0, 1.0, (k, m))
        cases.append(_case("matmul", f"{n}x{k}x{m}",
                           [(tensor.matmul(a, b), oracle_matmul(a, b))], tol))
        x = rng.normal(0.0, 2.0, (n, m))
        axis = int(rng.choice([0, 1]))
        cases.append(_case("softmax", f"{n}x{m} axis={axis}",
                           [(tensor.softmax(x, axis=axis), oracle_softmax(x, axis))],
                           tol))
    return cases


def oracle_encoder_suite(seed: int = 0, n_configs: int = 10,
                         tol: float = 1e-11) -> list[OracleCase]:
    cases = []
    for i in range(n_configs):
        rng = Rng(seed * 500009 + i)
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.choice([4, 6]))
        h_mix = 2 if d % 2 == 0 else 1
        cfg = EncoderConfig(
            d_model=d, n_heads=heads, n_z=int(rng.integers(1, 3)),
            n_c=int(rng.integers(1, 4)),
            n_layers=int(rng.choice([2, 3, 4])),
            insert_every=int(rng.choice([1, 2])),
            ffn_hidden=2 * d, lora_rank=2,
            w_init=_draw_w(rng),
            hmoe_attn=HmoeConfig(d_model=d, heads_per_expert=h_mix,
                                 n_experts=2, expert_rank=1),
            hmoe_ffn=HmoeConfig(d_model=d, heads_per_expert=1,
                                n_experts=3, expert_rank=1),
        )
        layers = init_encoder(cfg, rng)
        for layer in layers:
            if layer.adapter is not None:
                layer.adapter.bk = rng.normal(0.0, 0.3, (cfg.lora_rank, d))
                layer.adapter.bv = rng.normal(0.0, 0.3, (cfg.lora_rank, d))
        n = cfg.n_z + cfg.n_c
        stream = DualStream(h_rgb=rng.normal(0.0, 1.0, (n, d)),
                            h_x=rng.normal(0.0, 1.0, (n, d)),
                            n_z=cfg.n_z, n_c=cfg.n_c)
        out = encoder_forward(cfg, layers, stream)
        ref = oracle_encoder_forward(cfg, layers, stream)
        detail = (f"d={d} heads={heads} layers={cfg.n_layers} "
                  f"every={cfg.insert_every} nz={cfg.n_z} nc={cfg.n_c}")
        cases.append(_case("encoder", detail, [
            (out.fused_candidate, ref["fused_candidate"]),
            (out.final_rgb, ref["final_rgb"]),
            (out.final_x, ref["final_x"]),
        ], tol))
    return cases


def run_oracle_suites(seed: int = 0, n_attention: int = 100, n_hmoe: int = 100,
                      n_tensor: int = 30, n_encoder: int = 8,
                      tol: float = 1e-11) -> dict:
    cases = []
    cases += oracle_tensor_suite(seed, n_tensor, tol)
    cases += oracle_attention_suite(seed, n_attention, tol)
    cases += oracle_hmoe_suite(seed, n_hmoe, tol)
    cases += oracle_encoder_suite(seed, n_encoder, tol)
    worst = max(cases, key=lambda c: c.error)
    return {
        "cases": cases,
        "n_cases": len(cases),
        "n_failed": sum(1 for c in cases if not c.passed),
        "max_error": worst.error,
        "worst": f"{worst.name}: {worst.detail}",
        "tolerance": tol,
        "passed": all(c.passed for c in cases),
    }
