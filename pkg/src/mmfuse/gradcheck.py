"""Finite-difference verification of every hand-written backward pass.

Central differences with a fixed step, compared entrywise against the analytic
gradients under a scale-aware relative error.  Adapter output factors are
randomized before checking so no path is accidentally dead; dead paths get
their own exact-zero check in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionConfig,
    DualStream,
    attention_backward,
    attention_forward,
    init_aligned_attention,
)
from .hmoe import HmoeConfig, _softmax_backward_axis, hmoe_backward, hmoe_forward, init_hmoe
from .tensor import Rng, softmax

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-6
REL_FLOOR = 1e-8


def finite_diff_grad(f, theta: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of scalar f at theta, one entry at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        bump = theta.copy()
        bump[idx] = theta[idx] + eps
        hi = f(bump)
        bump[idx] = theta[idx] - eps
        lo = f(bump)
        grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradCheckReport:
    name: str
    parameter: str
    detail: str
    max_rel_err: float
    tolerance: float
    eps: float
    passed: bool


def _report(name, parameter, detail, analytic, numeric, tol, eps) -> GradCheckReport:
    err = max_rel_err(analytic, numeric)
    return GradCheckReport(name=name, parameter=parameter, detail=detail,
                           max_rel_err=err, tolerance=tol, eps=eps,
                           passed=err < tol)


# --------------------------------------------------------- attention checks

def _attention_loss(layer, stream) -> float:
    out_rgb, out_x, _ = attention_forward(layer, stream)
    return float(np.sum(out_rgb * out_rgb) + np.sum(out_x * out_x))


def gradcheck_attention(seed: int = 0, n_configs: int = 10,
                        tol: float = DEFAULT_TOL,
                        eps: float = DEFAULT_EPS) -> list[GradCheckReport]:
    reports = []
    for i in range(n_configs):
        rng = Rng(seed * 7001 + i)
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([2, 3]))
        d = heads * dh
        rank = int(rng.integers(1, min(3, d)))
        cfg = AttentionConfig(
            d_model=d, n_heads=heads, rank=rank,
            w_init=rng.uniform(0.2, 0.8),
            scale_mode=str(rng.choice(["per_head", "full_dim"])),
        )
        layer = init_aligned_attention(cfg, rng)
        layer.bk = rng.normal(0.0, 0.5, (rank, d))
        layer.bv = rng.normal(0.0, 0.5, (rank, d))
        layer.w_rgb = rng.uniform(0.2, 0.8)
        n_z, n_c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        stream = DualStream(
            h_rgb=rng.normal(0.0, 1.0, (n_z + n_c, d)),
            h_x=rng.normal(0.0, 1.0, (n_z + n_c, d)),
            n_z=n_z, n_c=n_c,
        )
        detail = (f"d={d} heads={heads} rank={rank} nz={n_z} nc={n_c} "
                  f"scale={cfg.scale_mode}")
        out_rgb, out_x, cache = attention_forward(layer, stream)
        grads = attention_backward(layer, cache, 2.0 * out_rgb, 2.0 * out_x)

        def param_loss(field):
            def f(value):
                old = getattr(layer, field)
                setattr(layer, field, value)
                try:
                    return _attention_loss(layer, stream)
                finally:
                    setattr(layer, field, old)
            return f

        for field in ("ak", "bk", "av", "bv"):
            numeric = finite_diff_grad(param_loss(field), getattr(layer, field), eps)
            reports.append(_report("attention", field, detail,
                                   getattr(grads, field), numeric, tol, eps))
        for field in ("w_x", "w_rgb"):
            def f_scalar(value, field=field):
                old = getattr(layer, field)
                setattr(layer, field, float(value[0]))
                try:
                    return _attention_loss(layer, stream)
                finally:
                    setattr(layer, field, old)
            numeric = finite_diff_grad(f_scalar, np.array([getattr(layer, field)]), eps)
            reports.append(_report("attention", field, detail,
                                   np.array([getattr(grads, field)]), numeric,
                                   tol, eps))
        for field, held in (("h_rgb", stream.h_rgb), ("h_x", stream.h_x)):
            def f_input(value, field=field):
                kw = {"h_rgb": stream.h_rgb, "h_x": stream.h_x,
                      "n_z": n_z, "n_c": n_c}
                kw[field] = value
                return _attention_loss(layer, DualStream(**kw))
            numeric = finite_diff_grad(f_input, held, eps)
            reports.append(_report("attention", field, detail,
                                   getattr(grads, field), numeric, tol, eps))
    return reports


# ------------------------------------------------------------- mixer checks

def _hmoe_loss(layer, x) -> float:
    y, _ = hmoe_forward(layer, x)
    return float(np.sum(y * y))


def gradcheck_hmoe(seed: int = 0, n_configs: int = 10,
                   tol: float = DEFAULT_TOL,
                   eps: float = DEFAULT_EPS) -> list[GradCheckReport]:
    reports = []
    for i in range(n_configs):
        rng = Rng(seed * 9001 + i)
        h = int(rng.choice([1, 2]))
        ds = int(rng.choice([3, 4]))
        d = h * ds
        e = int(rng.integers(1, 4))
        r = int(rng.integers(1, ds))
        cfg = HmoeConfig(d_model=d, heads_per_expert=h, n_experts=e,
                         expert_rank=r,
                         patch_agg=str(rng.choice(["sum", "mean"])))
        layer = init_hmoe(cfg, rng)
        n = int(rng.integers(1, 5))
        x = rng.normal(0.0, 1.0, (n, d))
        detail = f"d={d} h={h} e={e} r={r} n={n} agg={cfg.patch_agg}"
        y, cache = hmoe_forward(layer, x)
        grads = hmoe_backward(layer, cache, 2.0 * y)

        def param_loss(field):
            def f(value):
                old = getattr(layer, field)
                setattr(layer, field, value)
                try:
                    return _hmoe_loss(layer, x)
                finally:
                    setattr(layer, field, old)
            return f

        for field in ("phi", "expert_a", "expert_b", "pre_a", "pre_b",
                      "post_a", "post_b"):
            numeric = finite_diff_grad(param_loss(field), getattr(layer, field), eps)
            reports.append(_report("hmoe", field, detail,
                                   getattr(grads, field), numeric, tol, eps))
        numeric = finite_diff_grad(lambda v: _hmoe_loss(layer, v), x, eps)
        reports.append(_report("hmoe", "x_in", detail, grads.x_in, numeric,
                               tol, eps))
    return reports


# --------------------------------------------------- softmax Jacobian checks

def gradcheck_softmax(seed: int = 0, tol: float = DEFAULT_TOL,
                      eps: float = DEFAULT_EPS) -> list[GradCheckReport]:
    """Checks the row and column softmax Jacobian products independently."""
    reports = []
    rng = Rng(seed * 11003 + 17)
    x = rng.normal(0.0, 1.5, (4, 5))
    for axis, label in ((0, "columns"), (1, "rows")):
        s = softmax(x, axis=axis)
        analytic = _softmax_backward_axis(s, 2.0 * s, axis)

        def f(value, axis=axis):
            p = softmax(value, axis=axis)
            return float(np.sum(p * p))

        numeric = finite_diff_grad(f, x, eps)
        reports.append(_report("softmax", label, "4x5", analytic, numeric,
                               tol, eps))
    return reports


def run_gradcheck_suites(seed: int = 0, n_attention: int = 10,
                         n_hmoe: int = 10, tol: float = DEFAULT_TOL,
                         eps: float = DEFAULT_EPS) -> dict:
    reports = []
    reports += gradcheck_softmax(seed, tol, eps)
    reports += gradcheck_attention(seed, n_attention, tol, eps)
    reports += gradcheck_hmoe(seed, n_hmoe, tol, eps)
    worst = max(reports, key=lambda r: r.max_rel_err)
    return {
        "reports": reports,
        "n_reports": len(reports),
        "n_failed": sum(1 for r in reports if not r.passed),
        "max_rel_err": worst.max_rel_err,
        "worst": f"{worst.name}.{worst.parameter}: {worst.detail}",
        "tolerance": tol,
        "eps": eps,
        "passed": all(r.passed for r in reports),
    }
