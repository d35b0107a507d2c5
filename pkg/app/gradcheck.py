# app/gradcheck.py
"""Finite-difference oracle that every reverse-mode gradient is verified against."""
from __future__ import annotations

import logging
from typing import Callable, List, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from app.errors import NonFiniteError, ShapeError
from app.metrics import GRADIENT_CHECKS_TOTAL
from app.tensor import Tape, Tensor

logger = logging.getLogger("vlm.gradcheck")

ScalarFn = Callable[[Tensor], Union[Tensor, float]]


def _scalar(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_grad(f: ScalarFn, x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central differences, one component at a time."""
    base = x.numpy()
    grad = np.zeros_like(base)
    for i in range(base.size):
        idx = np.unravel_index(i, base.shape)
        shifted = base.copy()
        shifted[idx] = base[idx] + eps
        f_plus = _scalar(f(Tensor(shifted, dtype=base.dtype)))
        shifted[idx] = base[idx] - eps
        f_minus = _scalar(f(Tensor(shifted, dtype=base.dtype)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(
                f"non-finite function value while perturbing component {tuple(int(j) for j in idx)}",
                index=tuple(int(j) for j in idx),
            )
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad, dtype=base.dtype)


class Offender(BaseModel):
    index: List[int]
    analytic: float
    numeric: float
    abs_error: float


class GradientReport(BaseModel):
    passed: bool
    checked: int
    failed: int
    max_abs_error: float
    max_rel_error: float
    worst: List[Offender] = Field(default_factory=list)


def check_gradient(
    analytic: Union[Tensor, np.ndarray],
    numeric: Union[Tensor, np.ndarray],
    rel_tol: float = 1e-4,
    abs_tol: float = 0.0,
    top: int = 5,
) -> GradientReport:
    """Pass per component when |a - n| <= abs_tol + rel_tol * max(|a|, |n|)."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"check_gradient: analytic {a.shape} vs numeric {n.shape}")

    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    bad = err > abs_tol + rel_tol * scale
    rel = np.divide(err, scale, out=np.zeros_like(err), where=scale > 0)

    order = np.argsort(-err, axis=None, kind="stable")[: min(top, err.size)]
    worst = [
        Offender(
            index=[int(j) for j in np.unravel_index(k, err.shape)],
            analytic=float(a.flat[k]),
            numeric=float(n.flat[k]),
            abs_error=float(err.flat[k]),
        )
        for k in order
        if bad.flat[k]
    ]
    report = GradientReport(
        passed=not bool(bad.any()),
        checked=int(err.size),
        failed=int(bad.sum()),
        max_abs_error=float(err.max()) if err.size else 0.0,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst=worst,
    )
    GRADIENT_CHECKS_TOTAL.labels(result="pass" if report.passed else "fail").inc()
    if not report.passed:
        logger.info("[gradcheck] failed=%d/%d max_rel=%.3e", report.failed, report.checked, report.max_rel_error)
    return report


def check_vjp(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
) -> GradientReport:
    """Compare <vjp(u), v> against <u, (f(x + eps v) - f(x - eps v)) / 2 eps> for random u, v."""
    xs = [Tensor(x) for x in inputs]
    with Tape() as tape:
        tape.watch(*xs)
        out = fn(*xs)
    u = rng.standard_normal(out.shape)
    grads = tape.gradient(out, xs, upstream=u)
    vs = [rng.standard_normal(x.shape) for x in inputs]
    analytic = float(np.sum([np.sum(g * v) for g, v in zip(grads, vs)]))

    plus = fn(*[Tensor(x + eps * v) for x, v in zip(inputs, vs)]).data
    minus = fn(*[Tensor(x - eps * v) for x, v in zip(inputs, vs)]).data
    numeric = float(np.sum(u * (plus - minus)) / (2.0 * eps))
    return check_gradient(np.array([analytic]), np.array([numeric]), rel_tol=rel_tol, abs_tol=1e-9)
