"""Alignment statistics between the two streams' attention maps.

Cosine similarity is computed on flattened pre-softmax maps, one value per
head, then averaged.  The divergence statistic row-normalizes each map with a
softmax and takes the symmetrized KL mean over rows and heads.  Probabilities
are clamped at a tiny floor before the log; the reported value is the plain
unscaled divergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import softmax

PROB_FLOOR = 1e-12


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(
            f"expected stacked per-head maps of rank 3, got ranks {a.ndim} and {b.ndim}"
        )
    if a.shape != b.shape:
        raise DimensionError(f"map shape mismatch: {a.shape} vs {b.shape}")


def map_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over heads of the cosine between flattened maps.

    The denominator is sqrt of the product of the two self inner products, so
    comparing a map against the identical array divides a number by itself.
    An all-zero side yields 0 by convention.
    """
    _check_pair(a, b)
    vals = []
    for h in range(a.shape[0]):
        fa = a[h].ravel()
        fb = b[h].ravel()
        s_ab = float(np.dot(fa, fb))
        s_aa = float(np.dot(fa, fa))
        s_bb = float(np.dot(fb, fb))
        denom = np.sqrt(s_aa * s_bb)
        vals.append(s_ab / denom if denom > 0.0 else 0.0)
    return float(np.mean(vals))


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pc = np.maximum(p, PROB_FLOOR)
    qc = np.maximum(q, PROB_FLOOR)
    return np.sum(p * (np.log(pc) - np.log(qc)), axis=-1)


def map_divergence(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetrized KL between row-softmaxed maps, averaged over rows and heads."""
    _check_pair(a, b)
    vals = []
    for h in range(a.shape[0]):
        p = softmax(a[h], axis=1)
        q = softmax(b[h], axis=1)
        skl = 0.5 * (_kl_rows(p, q) + _kl_rows(q, p))
        vals.append(float(np.mean(skl)))
    return float(np.mean(vals))


@dataclass
class AlignmentStats:
    per_layer_cos: list[float]
    per_layer_skl: list[float]
    mean_cos: float
    mean_skl: float

    @property
    def n_layers(self) -> int:
        return len(self.per_layer_cos)


def alignment_stats(maps_rgb: list[np.ndarray], maps_x: list[np.ndarray]) -> AlignmentStats:
    if len(maps_rgb) != len(maps_x):
        raise DimensionError(
            f"layer count mismatch: {len(maps_rgb)} vs {len(maps_x)}"
        )
    if not maps_rgb:
        raise DimensionError("no maps given")
    cos = [map_cosine(a, b) for a, b in zip(maps_rgb, maps_x)]
    skl = [map_divergence(a, b) for a, b in zip(maps_rgb, maps_x)]
    return AlignmentStats(
        per_layer_cos=cos, per_layer_skl=skl,
        mean_cos=float(np.mean(cos)), mean_skl=float(np.mean(skl)),
    )
