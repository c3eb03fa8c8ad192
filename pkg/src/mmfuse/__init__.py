"""Multimodal fusion modules over a frozen two-stream transformer.

Guided dual-stream attention with low-rank key/value adapters, a hierarchical
soft expert mixer for token fusion, the frozen encoder they plug into, and
the verification, audit, and benchmark tooling around them.
"""

from .attention import (
    AlignedAttentionLayer,
    AttentionConfig,
    DualStream,
    align_attention_maps,
    attention_backward,
    attention_forward,
    guided_blend,
    init_aligned_attention,
    merge_lora,
    merged_attention_forward,
    raw_attention_maps,
)
from .encoder import (
    EncoderConfig,
    encoder_forward,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
    two_tower_baseline,
    vit_base_config,
)
from .errors import (
    ConfigError,
    DimensionError,
    NumericError,
    StateError,
    TensorFileError,
)
from .hmoe import (
    HmoeConfig,
    HmoeLayer,
    hmoe_backward,
    hmoe_forward,
    init_hmoe,
    token_affinity,
)
from .metrics import AlignmentStats, alignment_stats, map_cosine, map_divergence
from .tensor import Rng, matmul, softmax, xavier_init

__version__ = "0.1.0"

__all__ = [
    "AlignedAttentionLayer",
    "AlignmentStats",
    "AttentionConfig",
    "ConfigError",
    "DimensionError",
    "DualStream",
    "EncoderConfig",
    "HmoeConfig",
    "HmoeLayer",
    "NumericError",
    "Rng",
    "StateError",
    "TensorFileError",
    "alignment_stats",
    "align_attention_maps",
    "attention_backward",
    "attention_forward",
    "encoder_forward",
    "guided_blend",
    "hmoe_backward",
    "hmoe_forward",
    "init_aligned_attention",
    "init_encoder",
    "init_hmoe",
    "load_checkpoint",
    "map_cosine",
    "map_divergence",
    "matmul",
    "merge_lora",
    "merged_attention_forward",
    "raw_attention_maps",
    "save_checkpoint",
    "softmax",
    "token_affinity",
    "two_tower_baseline",
    "vit_base_config",
    "xavier_init",
]
