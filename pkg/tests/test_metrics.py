import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfuse.errors import DimensionError
from mmfuse.metrics import AlignmentStats, alignment_stats, map_cosine, map_divergence
from mmfuse.tensor import Rng


def maps(seed, heads=2, n=4):
    return Rng(seed).normal(0.0, 1.0, (heads, n, n))


class TestCosine:
    def test_self_similarity_is_exactly_one(self):
        a = maps(1)
        assert map_cosine(a, a) == 1.0

    def test_self_similarity_exact_across_scales(self):
        # the sqrt-of-product denominator makes the self case divide s by s
        for seed, sigma in ((2, 1e-6), (3, 1.0), (4, 1e3)):
            a = Rng(seed).normal(0.0, sigma, (3, 5, 5))
            assert map_cosine(a, a.copy()) == 1.0

    def test_bounded(self):
        for s in range(10):
            v = map_cosine(maps(s), maps(s + 100))
            assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12

    def test_positive_scale_invariance(self):
        a, b = maps(5), maps(6)
        base = map_cosine(a, b)
        for alpha in (1e-4, 0.5, 7.0, 1e5):
            assert abs(map_cosine(alpha * a, b) - base) < 1e-12

    def test_negation_flips_sign(self):
        a, b = maps(7), maps(8)
        assert map_cosine(-a, b) == pytest.approx(-map_cosine(a, b), abs=1e-12)

    def test_zero_map_convention(self):
        a = maps(9)
        assert map_cosine(np.zeros_like(a), a) == 0.0

    def test_rank_validation(self):
        with pytest.raises(DimensionError):
            map_cosine(np.zeros((4, 4)), np.zeros((4, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            map_cosine(maps(1, heads=2), maps(1, heads=3))


class TestDivergence:
    def test_self_divergence_is_exactly_zero(self):
        a = maps(10)
        assert map_divergence(a, a) == 0.0

    def test_symmetry_is_exact(self):
        for s in range(8):
            a, b = maps(s), maps(s + 50)
            assert map_divergence(a, b) == map_divergence(b, a)

    def test_nonnegative(self):
        for s in range(8):
            assert map_divergence(maps(s), maps(s + 50)) >= 0.0

    def test_grows_with_separation(self):
        a = maps(11)
        near = a + 0.01 * maps(12)
        far = a + 2.0 * maps(12)
        assert map_divergence(a, near) < map_divergence(a, far)

    def test_row_shift_invariance(self):
        # the divergence reads maps through a row softmax, which kills
        # per-row additive offsets
        a, b = maps(13), maps(14)
        shifted = a + 3.0
        assert map_divergence(shifted, b) == pytest.approx(
            map_divergence(a, b), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 10_000))
    def test_property_symmetric_and_nonnegative(self, s1, s2):
        a, b = maps(s1, heads=1, n=3), maps(s2, heads=1, n=3)
        d_ab = map_divergence(a, b)
        d_ba = map_divergence(b, a)
        assert d_ab == d_ba
        assert d_ab >= 0.0


class TestAlignmentStats:
    def test_per_layer_and_means(self):
        rgb = [maps(20), maps(21), maps(22)]
        x = [maps(30), maps(31), maps(32)]
        stats = alignment_stats(rgb, x)
        assert stats.n_layers == 3
        assert stats.mean_cos == pytest.approx(np.mean(stats.per_layer_cos))
        assert stats.mean_skl == pytest.approx(np.mean(stats.per_layer_skl))
        for i in range(3):
            assert stats.per_layer_cos[i] == map_cosine(rgb[i], x[i])
            assert stats.per_layer_skl[i] == map_divergence(rgb[i], x[i])

    def test_identical_stacks(self):
        rgb = [maps(40), maps(41)]
        stats = alignment_stats(rgb, [m.copy() for m in rgb])
        assert stats.mean_cos == 1.0
        assert stats.mean_skl == 0.0

    def test_layer_count_mismatch(self):
        with pytest.raises(DimensionError):
            alignment_stats([maps(1)], [maps(1), maps(2)])

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            alignment_stats([], [])
