import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfuse.attention import (
    AttentionConfig,
    AttentionGrads,
    DualStream,
    align_attention_maps,
    attention_backward,
    attention_forward,
    guided_blend,
    init_aligned_attention,
    layer_from_state,
    layer_state,
    merge_lora,
    merged_attention_forward,
    plain_attention_forward,
    raw_attention_maps,
)
from mmfuse.errors import ConfigError, DimensionError, StateError
from mmfuse.tensor import Rng


def make_layer(seed=0, d=8, heads=2, rank=2, w_x=0.7, w_rgb=0.3,
               scale_mode="per_head", live_adapters=True):
    rng = Rng(seed)
    cfg = AttentionConfig(d_model=d, n_heads=heads, rank=rank,
                          scale_mode=scale_mode)
    layer = init_aligned_attention(cfg, rng)
    if live_adapters:
        layer.bk = rng.normal(0.0, 0.5, (rank, d))
        layer.bv = rng.normal(0.0, 0.5, (rank, d))
    layer.w_x, layer.w_rgb = w_x, w_rgb
    return layer


def make_stream(seed=1, n_z=2, n_c=3, d=8):
    rng = Rng(seed)
    return DualStream(h_rgb=rng.normal(0.0, 1.0, (n_z + n_c, d)),
                      h_x=rng.normal(0.0, 1.0, (n_z + n_c, d)),
                      n_z=n_z, n_c=n_c)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            AttentionConfig(d_model=10, n_heads=3)

    def test_rank_bounds(self):
        with pytest.raises(ConfigError):
            AttentionConfig(d_model=8, n_heads=2, rank=0)
        with pytest.raises(ConfigError):
            AttentionConfig(d_model=8, n_heads=2, rank=8)

    def test_scale_modes(self):
        per_head = AttentionConfig(d_model=8, n_heads=2, rank=2,
                                   scale_mode="per_head")
        full = AttentionConfig(d_model=8, n_heads=2, rank=2,
                               scale_mode="full_dim")
        assert per_head.scale() == pytest.approx(1.0 / np.sqrt(4))
        assert full.scale() == pytest.approx(1.0 / np.sqrt(8))
        with pytest.raises(ConfigError):
            AttentionConfig(d_model=8, n_heads=2, rank=2, scale_mode="nope")

    def test_w_init_must_be_finite(self):
        with pytest.raises(ConfigError, match="w_init"):
            AttentionConfig(d_model=8, n_heads=2, rank=2, w_init=float("nan"))

    def test_stream_split_validation(self):
        rng = Rng(0)
        with pytest.raises(DimensionError):
            DualStream(h_rgb=rng.normal(0.0, 1.0, (5, 4)),
                       h_x=rng.normal(0.0, 1.0, (5, 4)), n_z=2, n_c=2)
        with pytest.raises(DimensionError):
            DualStream(h_rgb=rng.normal(0.0, 1.0, (4, 4)),
                       h_x=rng.normal(0.0, 1.0, (5, 4)), n_z=2, n_c=2)


class TestGuidedBlend:
    def test_zero_weight_returns_own_bitwise(self):
        rng = Rng(2)
        a, b = rng.normal(0.0, 1.0, (3, 3)), rng.normal(0.0, 1.0, (3, 3))
        out = guided_blend(a, b, 0.0)
        assert np.array_equal(out, a)
        out[0, 0] = 99.0   # must be a copy, not a view
        assert a[0, 0] != 99.0

    def test_unit_weight_swaps_bitwise(self):
        rng = Rng(3)
        a, b = rng.normal(0.0, 1.0, (3, 3)), rng.normal(0.0, 1.0, (3, 3))
        assert np.array_equal(guided_blend(a, b, 1.0), b)

    def test_half_weight_is_exact_mean(self):
        rng = Rng(4)
        a, b = rng.normal(0.0, 1.0, (3, 3)), rng.normal(0.0, 1.0, (3, 3))
        assert np.array_equal(guided_blend(a, b, 0.5), 0.5 * (a + b))

    def test_equal_inputs_fixed_point(self):
        a = Rng(5).normal(0.0, 1.0, (4, 4))
        for w in (0.0, 0.25, 0.5, 0.9, 1.0):
            assert np.array_equal(guided_blend(a, a.copy(), w), a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            guided_blend(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0),
           st.lists(st.floats(-100.0, 100.0), min_size=4, max_size=4),
           st.lists(st.floats(-100.0, 100.0), min_size=4, max_size=4))
    def test_property_convex_between_inputs(self, w, xs, ys):
        a = np.array(xs).reshape(2, 2)
        b = np.array(ys).reshape(2, 2)
        out = guided_blend(a, b, w)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        assert (out >= lo).all() and (out <= hi).all()


class TestAlignIdentities:
    def test_zero_guidance_leaves_maps_untouched(self):
        layer = make_layer(w_x=0.0, w_rgb=0.0)
        stream = make_stream()
        raw_rgb, raw_x = raw_attention_maps(layer, stream)
        al_rgb, al_x = align_attention_maps(layer, raw_rgb, raw_x)
        assert np.array_equal(al_rgb, raw_rgb)
        assert np.array_equal(al_x, raw_x)

    def test_unit_guidance_swaps_maps(self):
        layer = make_layer(w_x=1.0, w_rgb=1.0)
        stream = make_stream()
        raw_rgb, raw_x = raw_attention_maps(layer, stream)
        al_rgb, al_x = align_attention_maps(layer, raw_rgb, raw_x)
        assert np.array_equal(al_rgb, raw_x)
        assert np.array_equal(al_x, raw_rgb)

    def test_half_guidance_meets_in_the_middle(self):
        layer = make_layer(w_x=0.5, w_rgb=0.5)
        stream = make_stream()
        raw_rgb, raw_x = raw_attention_maps(layer, stream)
        al_rgb, al_x = align_attention_maps(layer, raw_rgb, raw_x)
        assert np.array_equal(al_rgb, al_x)

    def test_both_blends_read_original_maps(self):
        """The second blend must not see the first blend's output."""
        layer = make_layer(w_x=1.0, w_rgb=1.0)
        stream = make_stream()
        raw_rgb, raw_x = raw_attention_maps(layer, stream)
        _, al_x = align_attention_maps(layer, raw_rgb, raw_x)
        # if the rgb blend fed the x blend, al_x would collapse back to raw_x
        assert np.array_equal(al_x, raw_rgb)

    def test_identical_streams_are_a_fixed_point(self):
        layer = make_layer(w_x=0.37, w_rgb=0.81)
        rng = Rng(6)
        h = rng.normal(0.0, 1.0, (5, 8))
        stream = DualStream(h_rgb=h, h_x=h.copy(), n_z=2, n_c=3)
        raw_rgb, raw_x = raw_attention_maps(layer, stream)
        al_rgb, al_x = align_attention_maps(layer, raw_rgb, raw_x)
        assert np.array_equal(al_rgb, raw_rgb)
        assert np.array_equal(al_x, raw_x)


class TestForward:
    def test_output_shapes(self):
        layer = make_layer()
        stream = make_stream()
        out_rgb, out_x, cache = attention_forward(layer, stream)
        assert out_rgb.shape == (5, 8) and out_x.shape == (5, 8)
        assert cache.raw_rgb.shape == (2, 5, 5)
        assert cache.probs_x.shape == (2, 5, 5)

    def test_repeat_invocation_identical(self):
        layer = make_layer()
        stream = make_stream()
        a_rgb, a_x, _ = attention_forward(layer, stream)
        b_rgb, b_x, _ = attention_forward(layer, stream)
        assert np.array_equal(a_rgb, b_rgb)
        assert np.array_equal(a_x, b_x)

    def test_probabilities_rows_normalize(self):
        _, _, cache = attention_forward(make_layer(), make_stream())
        np.testing.assert_allclose(cache.probs_rgb.sum(axis=-1), 1.0, atol=1e-12)

    def test_fresh_init_with_zero_guidance_equals_plain(self):
        """Zero second factors and zero guidance leave the frozen path intact."""
        rng = Rng(9)
        cfg = AttentionConfig(d_model=8, n_heads=2, rank=2, w_init=0.0)
        layer = init_aligned_attention(cfg, rng)
        stream = make_stream()
        out_rgb, out_x, _ = attention_forward(layer, stream)
        plain_rgb, _ = plain_attention_forward(layer.wq, layer.wk, layer.wv,
                                               cfg, stream.h_rgb)
        plain_x, _ = plain_attention_forward(layer.wq, layer.wk, layer.wv,
                                             cfg, stream.h_x)
        assert np.array_equal(out_rgb, plain_rgb)
        assert np.array_equal(out_x, plain_x)

    def test_scale_mode_changes_maps(self):
        stream = make_stream()
        per_head = make_layer(scale_mode="per_head")
        full = make_layer(scale_mode="full_dim")
        a = raw_attention_maps(per_head, stream)[0]
        b = raw_attention_maps(full, stream)[0]
        assert not np.allclose(a, b)

    def test_width_mismatch_raises(self):
        narrow = DualStream(h_rgb=np.zeros((4, 6)), h_x=np.zeros((4, 6)),
                            n_z=2, n_c=2)
        with pytest.raises(DimensionError):
            attention_forward(make_layer(d=8), narrow)


class TestMerge:
    def test_merged_matches_bypass(self):
        layer = make_layer(seed=10, w_x=0.42, w_rgb=0.58)
        stream = make_stream(seed=11)
        out_rgb, out_x, _ = attention_forward(layer, stream)
        m_rgb, m_x = merged_attention_forward(merge_lora(layer), stream)
        assert np.max(np.abs(out_rgb - m_rgb)) < 1e-12
        assert np.max(np.abs(out_x - m_x)) < 1e-12

    def test_merge_copies_do_not_alias(self):
        layer = make_layer(seed=12)
        merged = merge_lora(layer)
        merged.wq[0, 0] += 1.0
        assert merged.wq[0, 0] != layer.wq[0, 0]

    def test_merged_layer_has_no_adapter_arrays(self):
        merged = merge_lora(make_layer())
        assert not hasattr(merged, "ak")
        assert not hasattr(merged, "bv")


class TestBackward:
    def test_grad_shapes(self):
        layer = make_layer(seed=13)
        stream = make_stream(seed=14)
        out_rgb, out_x, cache = attention_forward(layer, stream)
        g = attention_backward(layer, cache, 2 * out_rgb, 2 * out_x)
        assert g.ak.shape == layer.ak.shape
        assert g.bv.shape == layer.bv.shape
        assert isinstance(g.w_x, float) and isinstance(g.w_rgb, float)
        assert g.h_rgb.shape == stream.h_rgb.shape

    def test_frozen_projections_have_no_grad_fields(self):
        fields = set(AttentionGrads.__dataclass_fields__)
        assert fields == {"ak", "bk", "av", "bv", "w_x", "w_rgb", "h_rgb", "h_x"}

    def test_upstream_shape_mismatch_raises(self):
        layer = make_layer()
        stream = make_stream()
        _, _, cache = attention_forward(layer, stream)
        with pytest.raises(StateError):
            attention_backward(layer, cache, np.zeros((3, 8)), np.zeros((5, 8)))

    def test_zero_upstream_gives_zero_grads(self):
        layer = make_layer()
        stream = make_stream()
        _, _, cache = attention_forward(layer, stream)
        g = attention_backward(layer, cache, np.zeros((5, 8)), np.zeros((5, 8)))
        assert not np.any(g.ak) and not np.any(g.h_x)
        assert g.w_x == 0.0 and g.w_rgb == 0.0


class TestState:
    def test_archive_round_trip_bitwise(self, tmp_path):
        from mmfuse import tensorfile

        layer = make_layer(seed=15, w_x=0.9, w_rgb=0.1)
        path = str(tmp_path / "layer.bin")
        tensorfile.write_archive(path, layer_state(layer))
        back = layer_from_state(layer.config, tensorfile.read_archive(path))
        for f in ("wq", "wk", "wv", "ak", "bk", "av", "bv"):
            assert np.array_equal(getattr(back, f), getattr(layer, f))
        assert back.w_x == layer.w_x and back.w_rgb == layer.w_rgb

    def test_state_key_names(self):
        keys = set(layer_state(make_layer(), prefix="p."))
        assert keys == {"p.wq", "p.wk", "p.wv", "p.ak", "p.bk", "p.av",
                        "p.bv", "p.w_x", "p.w_rgb"}


class TestParamCount:
    def test_learnable_array_sizes(self):
        layer = make_layer(d=8, rank=2)
        learnable = (layer.ak.size + layer.bk.size + layer.av.size
                     + layer.bv.size + 2)
        assert learnable == 4 * 8 * 2 + 2

    def test_full_scale_layer_count(self):
        cfg = AttentionConfig(d_model=768, n_heads=12, rank=8)
        layer = init_aligned_attention(cfg, Rng(0))
        learnable = (layer.ak.size + layer.bk.size + layer.av.size
                     + layer.bv.size + 2)
        assert learnable == 24_578
