import numpy as np
import pytest

from mmfuse.attention import DualStream
from mmfuse.encoder import (
    EncoderConfig,
    encoder_forward,
    encoder_mac_count,
    encoder_param_report,
    init_encoder,
    load_checkpoint,
    lora_param_count,
    save_checkpoint,
    two_tower_baseline,
    vit_base_config,
)
from mmfuse.errors import ConfigError, DimensionError
from mmfuse.hmoe import HmoeConfig, hmoe_mac_count
from mmfuse.tensor import Rng


def small_config(**overrides):
    kw = dict(
        d_model=12, n_heads=2, n_z=2, n_c=3, n_layers=4, insert_every=2,
        lora_rank=2, ffn_hidden=24,
        hmoe_attn=HmoeConfig(d_model=12, heads_per_expert=2, n_experts=2,
                             expert_rank=2),
        hmoe_ffn=HmoeConfig(d_model=12, heads_per_expert=3, n_experts=3,
                            expert_rank=2),
    )
    kw.update(overrides)
    return EncoderConfig(**kw)


def make_stream(config, seed=1):
    rng = Rng(seed)
    n = config.n_z + config.n_c
    return DualStream(h_rgb=rng.normal(0.0, 1.0, (n, config.d_model)),
                      h_x=rng.normal(0.0, 1.0, (n, config.d_model)),
                      n_z=config.n_z, n_c=config.n_c)


class TestConfig:
    def test_insertion_rule(self):
        cfg = small_config(n_layers=12, insert_every=2)
        assert cfg.inserted_layers() == [1, 3, 5, 7, 9, 11]
        assert cfg.n_inserted == 6

    def test_insert_every_one_hits_every_layer(self):
        assert small_config(insert_every=1).inserted_layers() == [0, 1, 2, 3]

    def test_zero_disables_insertion(self):
        cfg = small_config(insert_every=0)
        assert cfg.inserted_layers() == []
        assert cfg.n_inserted == 0

    def test_insert_every_beyond_depth_rejected(self):
        with pytest.raises(ConfigError):
            small_config(insert_every=5)

    def test_mixer_width_must_match(self):
        with pytest.raises(ConfigError):
            small_config(hmoe_attn=HmoeConfig(d_model=8, heads_per_expert=2,
                                              expert_rank=2))

    def test_full_scale_defaults(self):
        cfg = vit_base_config()
        assert cfg.d_model == 768 and cfg.n_heads == 12
        assert cfg.n_layers == 12 and cfg.insert_every == 2
        assert cfg.ffn_hidden == 3072
        assert cfg.hmoe_attn.n_experts == 4 and cfg.hmoe_ffn.n_experts == 8
        assert cfg.n_inserted == 6


class TestInit:
    def test_only_inserted_layers_carry_modules(self):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(0))
        for i, layer in enumerate(layers):
            has = layer.adapter is not None
            assert has == (i in cfg.inserted_layers())
            assert (layer.hmoe_attn is not None) == has
            assert (layer.hmoe_ffn is not None) == has

    def test_adapter_second_factors_start_zero(self):
        layers = init_encoder(small_config(), Rng(0))
        for layer in layers:
            if layer.adapter is not None:
                assert not np.any(layer.adapter.bk)
                assert not np.any(layer.adapter.bv)
                assert np.any(layer.adapter.ak)

    def test_seed_reproducibility(self):
        cfg = small_config()
        a = init_encoder(cfg, Rng(5))
        b = init_encoder(cfg, Rng(5))
        for la, lb in zip(a, b):
            assert np.array_equal(la.wq, lb.wq)
            assert np.array_equal(la.ffn_w2, lb.ffn_w2)


class TestForward:
    def test_output_shapes(self):
        cfg = small_config()
        out = encoder_forward(cfg, init_encoder(cfg, Rng(0)), make_stream(cfg))
        assert out.fused_candidate.shape == (cfg.n_c, cfg.d_model)
        assert out.final_rgb.shape == (5, 12)
        assert len(out.layer_maps) == cfg.n_layers
        for m_rgb, m_x in out.layer_maps:
            assert m_rgb.shape == (cfg.n_heads, 5, 5)
            assert m_x.shape == (cfg.n_heads, 5, 5)

    def test_fused_candidate_is_stream_sum(self):
        cfg = small_config()
        out = encoder_forward(cfg, init_encoder(cfg, Rng(1)), make_stream(cfg))
        expect = out.final_rgb[cfg.n_z:] + out.final_x[cfg.n_z:]
        assert np.array_equal(out.fused_candidate, expect)

    def test_collect_maps_off(self):
        cfg = small_config()
        out = encoder_forward(cfg, init_encoder(cfg, Rng(1)), make_stream(cfg),
                              collect_maps=False)
        assert out.layer_maps == []

    def test_stream_split_must_match_config(self):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(0))
        bad = DualStream(h_rgb=np.zeros((5, 12)), h_x=np.zeros((5, 12)),
                         n_z=3, n_c=2)
        with pytest.raises(DimensionError):
            encoder_forward(cfg, layers, bad)

    def test_layer_count_must_match_config(self):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(0))
        with pytest.raises(DimensionError):
            encoder_forward(cfg, layers[:-1], make_stream(cfg))


class TestFunctionPreservingInit:
    def test_neutral_insertion_equals_two_tower_bitwise(self):
        """Zero guidance, zero adapter second factors, zero-output mixers:
        the augmented stack must reproduce the frozen baseline exactly."""
        cfg = small_config(w_init=0.0)
        layers = init_encoder(cfg, Rng(3), zero_output_hmoe=True)
        base_cfg, base_layers = two_tower_baseline(cfg, layers)
        stream = make_stream(cfg, seed=4)
        out = encoder_forward(cfg, layers, stream)
        ref = encoder_forward(base_cfg, base_layers, stream)
        assert np.array_equal(out.fused_candidate, ref.fused_candidate)
        assert np.array_equal(out.final_rgb, ref.final_rgb)
        assert np.array_equal(out.final_x, ref.final_x)

    def test_default_init_changes_outputs(self):
        # with live guidance the insertion must NOT be a no-op
        cfg = small_config(w_init=1.0)
        layers = init_encoder(cfg, Rng(3))
        base_cfg, base_layers = two_tower_baseline(cfg, layers)
        stream = make_stream(cfg, seed=4)
        out = encoder_forward(cfg, layers, stream)
        ref = encoder_forward(base_cfg, base_layers, stream)
        assert not np.allclose(out.fused_candidate, ref.fused_candidate)

    def test_baseline_shares_frozen_arrays(self):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(3))
        _, base_layers = two_tower_baseline(cfg, layers)
        assert base_layers[0].wq is layers[0].wq
        assert base_layers[1].ffn_w1 is layers[1].ffn_w1


class TestParamReport:
    def test_matches_actual_arrays(self):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(0))
        learnable = 0
        frozen = 0
        for layer in layers:
            frozen += (layer.wq.size + layer.wk.size + layer.wv.size
                       + layer.ffn_w1.size + layer.ffn_w2.size
                       + layer.ln1_g.size + layer.ln1_b.size
                       + layer.ln2_g.size + layer.ln2_b.size)
            if layer.adapter is not None:
                a = layer.adapter
                learnable += (a.ak.size + a.bk.size + a.av.size + a.bv.size + 2)
                for block in (layer.hmoe_attn, layer.hmoe_ffn):
                    learnable += (block.phi.size + block.expert_a.size
                                  + block.expert_b.size + block.pre_a.size
                                  + block.pre_b.size + block.post_a.size
                                  + block.post_b.size)
        report = encoder_param_report(cfg)
        assert report["learnable_total"] == learnable
        assert report["frozen_total"] == frozen

    def test_zero_insertion_means_zero_learnable(self):
        report = encoder_param_report(small_config(insert_every=0))
        assert report["learnable_total"] == 0
        assert report["lora_learnable"] == 0
        assert report["mixer_learnable"] == 0
        assert report["merged_lora_learnable"] == 0

    def test_full_scale_frozen_values(self):
        report = encoder_param_report(vit_base_config())
        assert report["lora_learnable"] == 147_468
        assert report["mixer_learnable"] == 423_936
        assert report["learnable_total"] == 571_404
        assert report["merged_lora_learnable"] == 12

    def test_lora_count_formula(self):
        cfg = small_config()
        assert lora_param_count(cfg) == cfg.n_inserted * (4 * 12 * 2 + 2)


class TestMacCount:
    def test_manual_small_model(self):
        cfg = small_config()
        n, d, f = 5, 12, 24
        per_layer_stream = 3 * n * d * d + 2 * n * n * d + 2 * n * d * f
        backbone = per_layer_stream * 4 * 2
        adapters = 2 * 2 * 4 * n * d * cfg.lora_rank
        mixers = 0
        for side in (cfg.hmoe_attn, cfg.hmoe_ffn):
            mixers += 2 * (hmoe_mac_count(side, 2 * cfg.n_z)
                           + hmoe_mac_count(side, 2 * cfg.n_c))
        got = encoder_mac_count(cfg)
        assert got["backbone"] == backbone
        assert got["adapters"] == adapters
        assert got["mixers"] == mixers
        assert got["total"] == backbone + adapters + mixers

    def test_merged_drops_adapter_term_only(self):
        cfg = small_config()
        unmerged = encoder_mac_count(cfg, merged_lora=False)
        merged = encoder_mac_count(cfg, merged_lora=True)
        assert merged["adapters"] == 0
        assert merged["backbone"] == unmerged["backbone"]
        assert merged["mixers"] == unmerged["mixers"]
        assert unmerged["total"] - merged["total"] == unmerged["adapters"]

    def test_full_scale_backbone_frozen_value(self):
        got = encoder_mac_count(vit_base_config())
        assert got["backbone"] == 53_603_205_120
        assert got["adapters"] == 94_371_840
        assert got["total"] == 53_923_479_552


class TestCheckpoint:
    def test_round_trip_forward_bitwise(self, tmp_path):
        cfg = small_config()
        layers = init_encoder(cfg, Rng(7))
        stream = make_stream(cfg, seed=8)
        out = encoder_forward(cfg, layers, stream)
        ckdir = str(tmp_path / "ck")
        save_checkpoint(ckdir, cfg, layers)
        cfg2, layers2 = load_checkpoint(ckdir)
        out2 = encoder_forward(cfg2, layers2, stream)
        assert np.array_equal(out.fused_candidate, out2.fused_candidate)
        assert np.array_equal(out.final_rgb, out2.final_rgb)
        assert np.array_equal(out.final_x, out2.final_x)

    def test_config_survives(self, tmp_path):
        cfg = small_config(w_init=0.25, scale_mode="full_dim")
        ckdir = str(tmp_path / "ck")
        save_checkpoint(ckdir, cfg, init_encoder(cfg, Rng(7)))
        cfg2, _ = load_checkpoint(ckdir)
        assert cfg2 == cfg

    def test_two_tower_checkpoint(self, tmp_path):
        cfg = small_config(insert_every=0)
        layers = init_encoder(cfg, Rng(9))
        ckdir = str(tmp_path / "ck")
        save_checkpoint(ckdir, cfg, layers)
        cfg2, layers2 = load_checkpoint(ckdir)
        assert cfg2.n_inserted == 0
        assert all(l.adapter is None for l in layers2)
        stream = make_stream(cfg, seed=10)
        assert np.array_equal(
            encoder_forward(cfg, layers, stream).fused_candidate,
            encoder_forward(cfg2, layers2, stream).fused_candidate)
