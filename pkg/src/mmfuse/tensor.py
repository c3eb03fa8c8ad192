"""Dense row-major tensor substrate: deterministic ops, seeded init, two float widths.

Arrays are plain C-contiguous numpy ndarrays in float32 (throughput runs) or
float64 (verification runs).  Every op is pure: operands are never mutated and
results never alias an input.  There is no implicit broadcasting; shape
mismatches raise instead of stretching.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

F32 = np.float32
F64 = np.float64
_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


def _check_dtype(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.dtype not in _ALLOWED:
            raise DimensionError(f"unsupported dtype {a.dtype}; use float32 or float64")
    if len(arrays) == 2 and arrays[0].dtype != arrays[1].dtype:
        raise DimensionError(
            f"mixed dtypes {arrays[0].dtype} and {arrays[1].dtype}; cast explicitly"
        )


class Rng:
    """Seeded random source. Identical seed ⇒ identical draw sequence, run to run."""

    def __init__(self, seed: int):
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an int, got {type(seed).__name__}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None, dtype=F64):
        if size is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size=size).astype(dtype)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None, dtype=F64):
        if size is None:
            return float(loc + scale * self._gen.standard_normal())
        return (loc + scale * self._gen.standard_normal(size=size)).astype(dtype)

    def integers(self, low: int, high: int) -> int:
        # half-open [low, high)
        return int(self._gen.integers(low, high))

    def choice(self, options):
        return options[self.integers(0, len(options))]


def xavier_init(rng: Rng, shape, dtype=F64) -> np.ndarray:
    """Uniform draw in ±sqrt(6 / (fan_in + fan_out)). Rank-2 shapes only."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise DimensionError(f"xavier_init needs a rank-2 shape, got {shape}")
    if min(shape) < 1:
        raise DimensionError(f"xavier_init shape entries must be positive, got {shape}")
    fan_in, fan_out = shape
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, shape, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strict 2-D matrix product.

    float64 accumulates sequentially over the inner index so the result is
    bit-identical to a scalar triple loop; float32 dispatches to BLAS for
    throughput and keeps determinism only run-to-run, not order-of-summation.
    """
    _check_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.dtype == np.float64:
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n), dtype=a.dtype)
        tmp = np.empty((m, n), dtype=a.dtype)
        for i in range(k):
            np.multiply(a[:, i, None], b[i, None, :], out=tmp)
            np.add(out, tmp, out=out)
        return out
    return np.matmul(a, b)


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    """Max-subtracted exponential normalization along one axis."""
    _check_dtype(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def transpose(x: np.ndarray) -> np.ndarray:
    _check_dtype(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 operand, got shape {x.shape}")
    return np.ascontiguousarray(x.T)


def concat(parts, axis: int) -> np.ndarray:
    if not parts:
        raise DimensionError("concat needs at least one operand")
    for p in parts:
        _check_dtype(p)
    ranks = {p.ndim for p in parts}
    if len(ranks) != 1:
        raise DimensionError(f"concat operands have mixed ranks {sorted(ranks)}")
    rank = ranks.pop()
    if not -rank <= axis < rank:
        raise DimensionError(f"concat axis {axis} out of range for rank {rank}")
    dtypes = {p.dtype for p in parts}
    if len(dtypes) != 1:
        raise DimensionError(f"concat operands have mixed dtypes {sorted(map(str, dtypes))}")
    ax = axis % rank
    base = [s for i, s in enumerate(parts[0].shape) if i != ax]
    for p in parts[1:]:
        if [s for i, s in enumerate(p.shape) if i != ax] != base:
            raise DimensionError(f"concat shapes disagree off axis {axis}")
    return np.concatenate(parts, axis=ax)


def split(x: np.ndarray, parts: int, axis: int) -> list[np.ndarray]:
    """Cut into `parts` equal contiguous pieces along `axis`."""
    _check_dtype(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"split axis {axis} out of range for rank {x.ndim}")
    if parts < 1:
        raise DimensionError(f"split needs parts >= 1, got {parts}")
    ax = axis % x.ndim
    if x.shape[ax] % parts != 0:
        raise DimensionError(f"axis {axis} of length {x.shape[ax]} not divisible into {parts} parts")
    return [np.ascontiguousarray(p) for p in np.split(x, parts, axis=ax)]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return a - b


def scale(x: np.ndarray, s: float) -> np.ndarray:
    _check_dtype(x)
    return x * x.dtype.type(s)


def reshape(x: np.ndarray, shape) -> np.ndarray:
    _check_dtype(x)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"reshape shape entries must be positive, got {shape}")
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape {x.shape} -> {shape} changes element count")
    return np.ascontiguousarray(x).reshape(shape).copy()
