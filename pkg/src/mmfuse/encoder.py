"""Frozen two-tower transformer with fusion modules inserted every few layers.

Both modality streams run the same frozen pre-norm backbone (shared weights,
separate states).  At each insertion point the plain attention sublayer is
replaced by the guided dual-stream attention, and mixer blocks are appended
after the attention and feed-forward sublayers, applied separately to the
joined template tokens and the joined candidate tokens.  Only inserted-module
parameters are ever trainable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensorfile
from .attention import (
    AlignedAttentionLayer,
    AttentionConfig,
    DualStream,
    align_attention_maps,
    attention_forward,
    layer_from_state,
    layer_state,
    plain_attention_forward,
)
from .errors import ConfigError, DimensionError
from .hmoe import (
    HmoeConfig,
    HmoeLayer,
    hmoe_block_param_count,
    hmoe_from_state,
    hmoe_mac_count,
    hmoe_param_count,
    hmoe_state,
    init_hmoe,
)
from .tensor import Rng, matmul, xavier_init

LN_EPS = 1e-6


def _default_mixer(d_model: int, n_experts: int) -> HmoeConfig:
    return HmoeConfig(d_model=d_model, heads_per_expert=2, n_experts=n_experts, expert_rank=4)


@dataclass
class EncoderConfig:
    d_model: int
    n_heads: int
    n_z: int
    n_c: int
    n_layers: int = 12
    insert_every: int = 2       # 0 disables insertion (frozen two-tower baseline)
    ffn_hidden: int | None = None
    lora_rank: int = 8
    w_init: float = 1.0
    scale_mode: str = "per_head"
    hmoe_attn: HmoeConfig | None = None
    hmoe_ffn: HmoeConfig | None = None

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d_model
        if self.hmoe_attn is None:
            self.hmoe_attn = _default_mixer(self.d_model, 4)
        if self.hmoe_ffn is None:
            self.hmoe_ffn = _default_mixer(self.d_model, 8)
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be positive, got {self.n_layers}")
        if self.insert_every < 0 or self.insert_every > self.n_layers:
            raise ConfigError(
                f"insert_every {self.insert_every} outside 0..n_layers={self.n_layers}"
            )
        if self.n_z < 1 or self.n_c < 1:
            raise ConfigError(f"n_z={self.n_z}, n_c={self.n_c} must be positive")
        for side in (self.hmoe_attn, self.hmoe_ffn):
            if side.d_model != self.d_model:
                raise ConfigError(
                    f"mixer width {side.d_model} != encoder width {self.d_model}"
                )
        # validates divisibility, rank bounds, scale mode
        self.attention_config()

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model, n_heads=self.n_heads, rank=self.lora_rank,
            w_init=self.w_init, scale_mode=self.scale_mode,
        )

    def inserted_layers(self) -> list[int]:
        if self.insert_every == 0:
            return []
        return [i for i in range(self.n_layers) if (i + 1) % self.insert_every == 0]

    @property
    def n_inserted(self) -> int:
        return len(self.inserted_layers())


def vit_base_config(n_z: int = 64, n_c: int = 256, **overrides) -> EncoderConfig:
    """Full-scale geometry: 768-wide, 12 heads, 12 layers, insertion every 2."""
    return EncoderConfig(d_model=768, n_heads=12, n_z=n_z, n_c=n_c, **overrides)


@dataclass
class AdapterState:
    ak: np.ndarray
    bk: np.ndarray
    av: np.ndarray
    bv: np.ndarray
    w_x: float
    w_rgb: float


@dataclass
class EncoderLayer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    ffn_w1: np.ndarray
    ffn_w2: np.ndarray
    adapter: AdapterState | None = None
    hmoe_attn: HmoeLayer | None = None
    hmoe_ffn: HmoeLayer | None = None

    def aligned_view(self, config: AttentionConfig) -> AlignedAttentionLayer:
        if self.adapter is None:
            raise ConfigError("layer has no adapter state")
        a = self.adapter
        return AlignedAttentionLayer(
            config=config, wq=self.wq, wk=self.wk, wv=self.wv,
            ak=a.ak, bk=a.bk, av=a.av, bv=a.bv, w_x=a.w_x, w_rgb=a.w_rgb,
        )


@dataclass
class EncoderOutput:
    fused_candidate: np.ndarray
    final_rgb: np.ndarray
    final_x: np.ndarray
    layer_maps: list  # per layer: (pre-softmax maps rgb, pre-softmax maps x)


def init_encoder(config: EncoderConfig, rng: Rng, dtype=np.float64,
                 zero_output_hmoe: bool = False) -> list[EncoderLayer]:
    d, f = config.d_model, config.ffn_hidden
    inserted = set(config.inserted_layers())
    layers = []
    for i in range(config.n_layers):
        layer = EncoderLayer(
            ln1_g=np.ones(d, dtype=dtype), ln1_b=np.zeros(d, dtype=dtype),
            ln2_g=np.ones(d, dtype=dtype), ln2_b=np.zeros(d, dtype=dtype),
            wq=xavier_init(rng, (d, d), dtype=dtype),
            wk=xavier_init(rng, (d, d), dtype=dtype),
            wv=xavier_init(rng, (d, d), dtype=dtype),
            ffn_w1=xavier_init(rng, (d, f), dtype=dtype),
            ffn_w2=xavier_init(rng, (f, d), dtype=dtype),
        )
        if i in inserted:
            r = config.lora_rank
            layer.adapter = AdapterState(
                ak=xavier_init(rng, (d, r), dtype=dtype),
                bk=np.zeros((r, d), dtype=dtype),
                av=xavier_init(rng, (d, r), dtype=dtype),
                bv=np.zeros((r, d), dtype=dtype),
                w_x=float(config.w_init), w_rgb=float(config.w_init),
            )
            layer.hmoe_attn = init_hmoe(config.hmoe_attn, rng, dtype=dtype,
                                        zero_output=zero_output_hmoe)
            layer.hmoe_ffn = init_hmoe(config.hmoe_ffn, rng, dtype=dtype,
                                       zero_output=zero_output_hmoe)
        layers.append(layer)
    return layers


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + x.dtype.type(LN_EPS)) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    return 0.5 * x * (1.0 + np.tanh(c * (x + x.dtype.type(0.044715) * x ** 3)))


def ffn_forward(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    return matmul(gelu(matmul(x, w1)), w2)


def _mixer_fuse(block: HmoeLayer, part_rgb: np.ndarray, part_x: np.ndarray):
    """Run one mixer over the joined token group and split the update back."""
    from .hmoe import hmoe_forward

    n = part_rgb.shape[0]
    joined = np.concatenate([part_rgb, part_x], axis=0)
    y, _ = hmoe_forward(block, joined)
    return part_rgb + y[:n], part_x + y[n:]


def _apply_mixer(block: HmoeLayer, h_rgb: np.ndarray, h_x: np.ndarray, n_z: int):
    # templates and candidates are mixed as separate groups; weights are shared
    z_rgb, z_x = _mixer_fuse(block, h_rgb[:n_z], h_x[:n_z])
    c_rgb, c_x = _mixer_fuse(block, h_rgb[n_z:], h_x[n_z:])
    return (
        np.concatenate([z_rgb, c_rgb], axis=0),
        np.concatenate([z_x, c_x], axis=0),
    )


def encoder_forward(config: EncoderConfig, layers: list[EncoderLayer],
                    stream: DualStream, collect_maps: bool = True) -> EncoderOutput:
    if len(layers) != config.n_layers:
        raise DimensionError(f"{len(layers)} layers given, config says {config.n_layers}")
    if stream.h_rgb.shape[1] != config.d_model:
        raise DimensionError(
            f"stream width {stream.h_rgb.shape[1]} != d_model {config.d_model}"
        )
    if stream.n_z != config.n_z or stream.n_c != config.n_c:
        raise DimensionError(
            f"stream split ({stream.n_z}, {stream.n_c}) != config ({config.n_z}, {config.n_c})"
        )
    attn_cfg = config.attention_config()
    inserted = set(config.inserted_layers())
    h_rgb, h_x = stream.h_rgb, stream.h_x
    n_z = config.n_z
    maps_out = []
    for i, layer in enumerate(layers):
        a_rgb = layer_norm(h_rgb, layer.ln1_g, layer.ln1_b)
        a_x = layer_norm(h_x, layer.ln1_g, layer.ln1_b)
        if i in inserted:
            aligned = layer.aligned_view(attn_cfg)
            sub = DualStream(h_rgb=a_rgb, h_x=a_x, n_z=n_z, n_c=config.n_c)
            o_rgb, o_x, cache = attention_forward(aligned, sub)
            if collect_maps:
                maps_out.append(align_attention_maps(aligned, cache.raw_rgb, cache.raw_x))
            h_rgb = h_rgb + o_rgb
            h_x = h_x + o_x
            h_rgb, h_x = _apply_mixer(layer.hmoe_attn, h_rgb, h_x, n_z)
        else:
            o_rgb, raw_rgb = plain_attention_forward(layer.wq, layer.wk, layer.wv, attn_cfg, a_rgb)
            o_x, raw_x = plain_attention_forward(layer.wq, layer.wk, layer.wv, attn_cfg, a_x)
            if collect_maps:
                maps_out.append((raw_rgb, raw_x))
            h_rgb = h_rgb + o_rgb
            h_x = h_x + o_x
        f_rgb = layer_norm(h_rgb, layer.ln2_g, layer.ln2_b)
        f_x = layer_norm(h_x, layer.ln2_g, layer.ln2_b)
        h_rgb = h_rgb + ffn_forward(f_rgb, layer.ffn_w1, layer.ffn_w2)
        h_x = h_x + ffn_forward(f_x, layer.ffn_w1, layer.ffn_w2)
        if i in inserted:
            h_rgb, h_x = _apply_mixer(layer.hmoe_ffn, h_rgb, h_x, n_z)
    fused = h_rgb[n_z:] + h_x[n_z:]
    return EncoderOutput(
        fused_candidate=fused, final_rgb=h_rgb, final_x=h_x, layer_maps=maps_out,
    )


def two_tower_baseline(config: EncoderConfig, layers: list[EncoderLayer]):
    """Same frozen weights with every inserted module removed."""
    base_cfg = replace(config, insert_every=0,
                       hmoe_attn=config.hmoe_attn, hmoe_ffn=config.hmoe_ffn)
    base_layers = [
        EncoderLayer(
            ln1_g=l.ln1_g, ln1_b=l.ln1_b, ln2_g=l.ln2_g, ln2_b=l.ln2_b,
            wq=l.wq, wk=l.wk, wv=l.wv, ffn_w1=l.ffn_w1, ffn_w2=l.ffn_w2,
        )
        for l in layers
    ]
    return base_cfg, base_layers


def lora_param_count(config: EncoderConfig) -> int:
    """Adapter factors plus the two guidance scalars, over all inserted layers."""
    per_layer = 4 * config.d_model * config.lora_rank + 2
    return per_layer * config.n_inserted


def encoder_param_report(config: EncoderConfig) -> dict:
    d, f = config.d_model, config.ffn_hidden
    n_ins = config.n_inserted
    lora = lora_param_count(config)
    mixers = hmoe_param_count(config.hmoe_attn, config.hmoe_ffn, n_ins)
    frozen_per_layer = 3 * d * d + 2 * d * f + 4 * d
    frozen = frozen_per_layer * config.n_layers
    learnable = lora + mixers["total"]
    return {
        "lora_learnable": lora,
        "mixer_learnable": mixers["total"],
        "mixer_per_layer": mixers["per_layer"],
        "mixer_block_attn": mixers["block_attn"],
        "mixer_block_ffn": mixers["block_ffn"],
        "learnable_total": learnable,
        "frozen_total": frozen,
        "merged_lora_learnable": 2 * n_ins,
        "n_inserted": n_ins,
    }


def encoder_mac_count(config: EncoderConfig, merged_lora: bool = False) -> dict:
    """Matmul multiply-accumulates for one forward at the configured geometry."""
    d, f = config.d_model, config.ffn_hidden
    n = config.n_z + config.n_c
    per_layer_stream = 3 * n * d * d + 2 * n * n * d + 2 * n * d * f
    backbone = per_layer_stream * config.n_layers * 2
    n_ins = config.n_inserted
    adapters = 0 if merged_lora else n_ins * 2 * (4 * n * d * config.lora_rank)
    mixers = 0
    for side in (config.hmoe_attn, config.hmoe_ffn):
        mixers += n_ins * (hmoe_mac_count(side, 2 * config.n_z)
                           + hmoe_mac_count(side, 2 * config.n_c))
    return {
        "backbone": backbone,
        "adapters": adapters,
        "mixers": mixers,
        "total": backbone + adapters + mixers,
    }


# ---------------------------------------------------------------- checkpoints

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.bin"


def config_to_dict(config: EncoderConfig) -> dict:
    def mixer(m: HmoeConfig) -> dict:
        return {
            "d_model": m.d_model, "heads_per_expert": m.heads_per_expert,
            "n_experts": m.n_experts, "expert_rank": m.expert_rank,
            "patch_agg": m.patch_agg,
        }

    return {
        "d_model": config.d_model, "n_heads": config.n_heads,
        "n_z": config.n_z, "n_c": config.n_c,
        "n_layers": config.n_layers, "insert_every": config.insert_every,
        "ffn_hidden": config.ffn_hidden, "lora_rank": config.lora_rank,
        "w_init": config.w_init, "scale_mode": config.scale_mode,
        "hmoe_attn": mixer(config.hmoe_attn), "hmoe_ffn": mixer(config.hmoe_ffn),
    }


def config_from_dict(data: dict) -> EncoderConfig:
    data = dict(data)
    for key in ("hmoe_attn", "hmoe_ffn"):
        if key in data and data[key] is not None:
            data[key] = HmoeConfig(**data[key])
    return EncoderConfig(**data)


def save_checkpoint(directory: str, config: EncoderConfig,
                    layers: list[EncoderLayer]) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, CONFIG_FILE), "w") as fh:
        json.dump(config_to_dict(config), fh, indent=1, sort_keys=True)
    attn_cfg = config.attention_config()
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(layers):
        p = f"layer{i}."
        tensors[p + "ln1.g"] = layer.ln1_g
        tensors[p + "ln1.b"] = layer.ln1_b
        tensors[p + "ln2.g"] = layer.ln2_g
        tensors[p + "ln2.b"] = layer.ln2_b
        tensors[p + "ffn.w1"] = layer.ffn_w1
        tensors[p + "ffn.w2"] = layer.ffn_w2
        if layer.adapter is not None:
            tensors.update(layer_state(layer.aligned_view(attn_cfg), prefix=p))
            tensors.update(hmoe_state(layer.hmoe_attn, prefix=p + "hmoe_attn."))
            tensors.update(hmoe_state(layer.hmoe_ffn, prefix=p + "hmoe_ffn."))
        else:
            tensors[p + "wq"] = layer.wq
            tensors[p + "wk"] = layer.wk
            tensors[p + "wv"] = layer.wv
    tensorfile.write_archive(os.path.join(directory, WEIGHTS_FILE), tensors)


def load_checkpoint(directory: str):
    with open(os.path.join(directory, CONFIG_FILE)) as fh:
        config = config_from_dict(json.load(fh))
    state = tensorfile.read_archive(os.path.join(directory, WEIGHTS_FILE))
    attn_cfg = config.attention_config()
    inserted = set(config.inserted_layers())
    layers = []
    for i in range(config.n_layers):
        p = f"layer{i}."
        layer = EncoderLayer(
            ln1_g=state[p + "ln1.g"], ln1_b=state[p + "ln1.b"],
            ln2_g=state[p + "ln2.g"], ln2_b=state[p + "ln2.b"],
            wq=state[p + "wq"], wk=state[p + "wk"], wv=state[p + "wv"],
            ffn_w1=state[p + "ffn.w1"], ffn_w2=state[p + "ffn.w2"],
        )
        if i in inserted:
            al = layer_from_state(attn_cfg, state, prefix=p)
            layer.adapter = AdapterState(
                ak=al.ak, bk=al.bk, av=al.av, bv=al.bv, w_x=al.w_x, w_rgb=al.w_rgb,
            )
            layer.hmoe_attn = hmoe_from_state(config.hmoe_attn, state, prefix=p + "hmoe_attn.")
            layer.hmoe_ffn = hmoe_from_state(config.hmoe_ffn, state, prefix=p + "hmoe_ffn.")
        layers.append(layer)
    return config, layers
