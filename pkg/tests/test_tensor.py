import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfuse import tensor
from mmfuse.errors import ConfigError, DimensionError, NumericError
from mmfuse.tensor import Rng, matmul, softmax, xavier_init


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_float64_bitwise_equals_scalar_loop(self):
        # the backbone determinism contract: f64 accumulates in loop order
        rng = Rng(7)
        for m, k, n in [(3, 5, 4), (1, 1, 1), (8, 13, 2), (6, 32, 6)]:
            a = rng.normal(0.0, 1.0, (m, k))
            b = rng.normal(0.0, 1.0, (k, n))
            assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_float32_close_to_float64(self):
        rng = Rng(8)
        a64 = rng.normal(0.0, 1.0, (5, 9))
        b64 = rng.normal(0.0, 1.0, (9, 4))
        got = matmul(a64.astype(np.float32), b64.astype(np.float32))
        assert got.dtype == np.float32
        np.testing.assert_allclose(got, matmul(a64, b64), atol=1e-5)

    def test_rejects_mismatched_inner_dims(self):
        a = np.zeros((2, 3))
        b = np.zeros((4, 2))
        with pytest.raises(DimensionError):
            matmul(a, b)

    def test_rejects_mixed_dtypes(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 2), dtype=np.float32), np.zeros((2, 2)))

    def test_rejects_non_float(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 2), dtype=np.int64), np.zeros((2, 2), dtype=np.int64))

    def test_rejects_rank_one(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros(3), np.zeros((3, 2)))

    def test_does_not_mutate_operands(self):
        rng = Rng(9)
        a = rng.normal(0.0, 1.0, (3, 3))
        b = rng.normal(0.0, 1.0, (3, 3))
        a0, b0 = a.copy(), b.copy()
        matmul(a, b)
        assert np.array_equal(a, a0) and np.array_equal(b, b0)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = Rng(11)
        x = rng.normal(0.0, 3.0, (6, 7))
        s = softmax(x, axis=1)
        np.testing.assert_allclose(np.sum(s, axis=1), 1.0, atol=1e-12)

    def test_columns_sum_to_one(self):
        rng = Rng(12)
        s = softmax(rng.normal(0.0, 3.0, (6, 7)), axis=0)
        np.testing.assert_allclose(np.sum(s, axis=0), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = Rng(13)
        x = rng.normal(0.0, 1.0, (4, 5))
        np.testing.assert_allclose(softmax(x, axis=1), softmax(x + 100.0, axis=1),
                                   atol=1e-12)

    def test_large_magnitudes_stay_finite(self):
        x = np.array([[1000.0, -1000.0, 0.0]])
        s = softmax(x, axis=1)
        assert np.isfinite(s).all()
        assert s[0, 0] == pytest.approx(1.0)

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            softmax(np.array([[np.nan, 1.0]]), axis=1)

    def test_rejects_inf(self):
        with pytest.raises(NumericError):
            softmax(np.array([[np.inf, 1.0]]), axis=1)

    def test_rejects_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(np.zeros((2, 2)), axis=5)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(
                        lambda rows: len({len(r) for r in rows}) == 1))
    def test_property_simplex_rows(self, rows):
        x = np.array(rows, dtype=np.float64)
        s = softmax(x, axis=1)
        assert ((s >= 0) & (s <= 1)).all()
        np.testing.assert_allclose(np.sum(s, axis=1), 1.0, atol=1e-12)


class TestRng:
    def test_same_seed_same_draws(self):
        a = Rng(123).normal(0.0, 1.0, (4, 4))
        b = Rng(123).normal(0.0, 1.0, (4, 4))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal(0.0, 1.0, (4, 4)),
                                  Rng(2).normal(0.0, 1.0, (4, 4)))

    def test_rejects_non_int_seed(self):
        with pytest.raises(ConfigError):
            Rng("abc")
        with pytest.raises(ConfigError):
            Rng(1.5)

    def test_integers_half_open(self):
        rng = Rng(5)
        draws = {rng.integers(0, 3) for _ in range(200)}
        assert draws == {0, 1, 2}

    def test_choice_covers_options(self):
        rng = Rng(6)
        opts = ["a", "b", "c"]
        assert {rng.choice(opts) for _ in range(100)} == set(opts)

    def test_scalar_uniform_in_range(self):
        rng = Rng(7)
        for _ in range(50):
            v = rng.uniform(0.25, 0.75)
            assert isinstance(v, float) and 0.25 <= v < 0.75


class TestXavier:
    def test_bound(self):
        w = xavier_init(Rng(3), (30, 50))
        bound = np.sqrt(6.0 / 80.0)
        assert np.abs(w).max() <= bound
        # draws should actually use the range, not cluster at zero
        assert np.abs(w).max() > 0.5 * bound

    def test_dtype(self):
        assert xavier_init(Rng(3), (4, 4), dtype=np.float32).dtype == np.float32

    def test_rejects_non_matrix_shape(self):
        with pytest.raises(DimensionError):
            xavier_init(Rng(3), (4, 4, 4))

    def test_rejects_zero_dim(self):
        with pytest.raises(DimensionError):
            xavier_init(Rng(3), (0, 4))


class TestShapeOps:
    def test_transpose_round_trip(self):
        x = Rng(1).normal(0.0, 1.0, (3, 5))
        assert np.array_equal(tensor.transpose(tensor.transpose(x)), x)

    def test_transpose_returns_contiguous_copy(self):
        x = Rng(1).normal(0.0, 1.0, (3, 5))
        t = tensor.transpose(x)
        assert t.flags["C_CONTIGUOUS"]
        t[0, 0] = 99.0
        assert x[0, 0] != 99.0

    def test_split_then_concat_is_identity(self):
        x = Rng(2).normal(0.0, 1.0, (4, 6))
        for axis in (0, 1):
            parts = tensor.split(x, 2, axis=axis)
            assert np.array_equal(tensor.concat(parts, axis=axis), x)

    def test_split_rejects_uneven(self):
        with pytest.raises(DimensionError):
            tensor.split(np.zeros((4, 5)), 2, axis=1)

    def test_concat_rejects_mixed_dtype(self):
        with pytest.raises(DimensionError):
            tensor.concat([np.zeros((2, 2)), np.zeros((2, 2), dtype=np.float32)],
                          axis=0)

    def test_concat_rejects_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.concat([np.zeros((2, 3)), np.zeros((2, 4))], axis=0)

    def test_add_sub_shapes(self):
        a = Rng(4).normal(0.0, 1.0, (2, 2))
        b = Rng(5).normal(0.0, 1.0, (2, 2))
        assert np.array_equal(tensor.sub(tensor.add(a, b), b),
                              (a + b) - b)
        with pytest.raises(DimensionError):
            tensor.add(a, np.zeros((2, 3)))

    def test_no_broadcasting(self):
        # (2,2) + (1,2) broadcasts in numpy; here it must refuse
        with pytest.raises(DimensionError):
            tensor.add(np.zeros((2, 2)), np.zeros((1, 2)))

    def test_scale_preserves_dtype(self):
        x = np.ones((2, 2), dtype=np.float32)
        y = tensor.scale(x, 0.5)
        assert y.dtype == np.float32 and y[0, 0] == 0.5

    def test_reshape_row_major_and_copies(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        y = tensor.reshape(x, (3, 2))
        assert y[0, 1] == 1.0 and y[2, 1] == 5.0
        y[0, 0] = -1.0
        assert x[0, 0] == 0.0

    def test_reshape_rejects_bad_sizes(self):
        with pytest.raises(DimensionError):
            tensor.reshape(np.zeros((2, 3)), (4, 2))
        with pytest.raises(DimensionError):
            tensor.reshape(np.zeros((2, 3)), (-2, -3))
