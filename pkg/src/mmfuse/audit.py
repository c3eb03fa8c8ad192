"""Parameter and compute audits for the fusion-augmented encoder.

Counts are exact closed forms over the configuration, checked in the test
suite against brute-force enumeration of the initialized arrays.  Reference
budgets are the rounded published figures; the audit surfaces the signed
deviation rather than forcing agreement.
"""

from __future__ import annotations

from dataclasses import replace

from .encoder import EncoderConfig, encoder_mac_count, encoder_param_report, lora_param_count
from .errors import ConfigError
from .hmoe import HmoeConfig

# rounded budgets the full-scale configuration is audited against
REFERENCE_BUDGETS = {
    "lora_learnable": 140_000,
    "mixer_learnable": 460_000,
    "learnable_total": 600_000,
}

MIXER_BUDGET_TOLERANCE_PCT = 15.0


def _delta_pct(computed: int, reference: int) -> float:
    return 100.0 * (computed - reference) / reference


def audit_params(config: EncoderConfig) -> dict:
    report = encoder_param_report(config)
    out = {"n_inserted": report["n_inserted"],
           "frozen_total": report["frozen_total"],
           "merged_lora_learnable": report["merged_lora_learnable"]}
    for key, ref in REFERENCE_BUDGETS.items():
        computed = report[key]
        delta = _delta_pct(computed, ref)
        out[key] = {
            "computed": computed,
            "reference": ref,
            "delta_pct": delta,
            "within_tolerance": abs(delta) <= MIXER_BUDGET_TOLERANCE_PCT,
        }
    out["mixer_block_attn"] = report["mixer_block_attn"]
    out["mixer_block_ffn"] = report["mixer_block_ffn"]
    out["mixer_per_layer"] = report["mixer_per_layer"]
    return out


def _with_experts(config: EncoderConfig, attn_e: int, ffn_e: int) -> EncoderConfig:
    return replace(
        config,
        hmoe_attn=replace(config.hmoe_attn, n_experts=attn_e),
        hmoe_ffn=replace(config.hmoe_ffn, n_experts=ffn_e),
    )


DEFAULT_EXPERT_PAIRS = ((4, 4), (4, 8), (8, 4), (8, 16))


def expert_pair_sweep(config: EncoderConfig,
                      pairs=DEFAULT_EXPERT_PAIRS) -> list[dict]:
    rows = []
    for attn_e, ffn_e in pairs:
        swept = _with_experts(config, attn_e, ffn_e)
        report = encoder_param_report(swept)
        rows.append({
            "attn_experts": attn_e,
            "ffn_experts": ffn_e,
            "mixer_learnable": report["mixer_learnable"],
            "learnable_total": report["learnable_total"],
        })
    return rows


def lora_rank_sweep(config: EncoderConfig, ranks=(4, 8, 16)) -> list[dict]:
    rows = []
    for r in ranks:
        swept = replace(config, lora_rank=r)
        rows.append({
            "rank": r,
            "lora_learnable": lora_param_count(swept),
            "learnable_total": encoder_param_report(swept)["learnable_total"],
        })
    return rows


def mac_report(config: EncoderConfig) -> dict:
    unmerged = encoder_mac_count(config, merged_lora=False)
    merged = encoder_mac_count(config, merged_lora=True)
    overhead = 100.0 * (unmerged["total"] - merged["total"]) / merged["total"]
    return {
        "unmerged": unmerged,
        "merged": merged,
        "adapter_overhead_pct": overhead,
    }


DEFAULT_HEAD_VALUES = (1, 2, 3, 4, 6, 8)


def _with_mixer_heads(config: EncoderConfig, h: int) -> EncoderConfig:
    def retip(side: HmoeConfig) -> HmoeConfig:
        if config.d_model % h != 0:
            raise ConfigError(f"{h} mixer heads do not divide width {config.d_model}")
        return replace(side, heads_per_expert=h)

    return replace(config, hmoe_attn=retip(config.hmoe_attn),
                   hmoe_ffn=retip(config.hmoe_ffn))


def mac_head_sweep(config: EncoderConfig,
                   head_values=DEFAULT_HEAD_VALUES) -> dict:
    """Total inference MACs as the mixer head count varies, with spread.

    The mixing stage cost scales with the head count while every other term
    is constant, so the spread measures how visible that stage is against the
    whole forward pass.
    """
    totals = {}
    for h in head_values:
        totals[h] = encoder_mac_count(_with_mixer_heads(config, h))["total"]
    lo, hi = min(totals.values()), max(totals.values())
    return {
        "per_head_total": totals,
        "min": lo,
        "max": hi,
        "spread_pct": 100.0 * (hi - lo) / lo,
    }


def full_audit(config: EncoderConfig) -> dict:
    return {
        "params": audit_params(config),
        "macs": mac_report(config),
        "head_sweep": mac_head_sweep(config),
        "expert_pairs": expert_pair_sweep(config),
        "lora_ranks": lora_rank_sweep(config),
    }
