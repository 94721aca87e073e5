"""Single second-order step with backtracking for KL-constrained problems.

Solves ``max L(theta)  s.t.  D(theta) <= delta`` approximately: ``L`` is
linearised and ``D`` taken to quadratic order around ``theta_old``, the
search direction ``x ~ A^-1 g`` comes from conjugate gradient, and the
closed-form step is shrunk geometrically until both acceptance tests hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .numkit import NonFiniteError

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


class DegenerateDirectionError(ValueError):
    """``g^T A^-1 g`` is not positive: there is no ascent direction."""


@dataclass
class TrustRegionConfig:
    cg_iters: int = 10
    damping: float = 1e-5
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15
    subsample_fraction: float = 1.0
    strict_appendix_a: bool = False
    # absolute slack on the constraint test; absorbs rounding when the
    # unshrunk step lands exactly on the boundary
    constraint_slack: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if not 0.0 < self.backtrack_ratio < 1.0:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")


@dataclass
class TrustRegionProblem:
    """Callbacks describing one constrained step.

    ``curvature_vp_fn(idx, v)`` receives the row indices of the curvature
    subsample (``None`` means all rows) and returns ``A v``.
    """

    gradient_fn: Callable[[], np.ndarray]
    curvature_vp_fn: Callable[[Optional[np.ndarray], np.ndarray], np.ndarray]
    eval_fn: Callable[[np.ndarray], Tuple[float, float]]
    theta_old: np.ndarray
    delta: float
    n_samples: Optional[int] = None


@dataclass
class StepReport:
    accepted: bool
    backtracks_used: int
    step_norm: float
    objective_before: float
    objective_after: float
    constraint_after: float
    cg_residual: float
    reason: str = ""


def conjugate_gradient(avp, g, iters, damping=0.0, residual_tol=1e-10):
    """Approximately solve ``(A + damping I) x = g`` from products ``A v``.

    Returns ``(x, residual_norm)``.
    """
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if np.sqrt(rr) <= residual_tol:
            break
        Ap = np.asarray(avp(p), dtype=np.float64) + damping * p
        pAp = p @ Ap
        if not np.isfinite(pAp) or not np.all(np.isfinite(Ap)):
            raise NonFiniteError("non-finite curvature product inside conjugate gradient")
        if pAp <= 0:
            logger.warning("conjugate gradient met non-positive curvature %.3e", pAp)
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("conjugate gradient produced non-finite iterate")
    return x, float(np.sqrt(rr))


def analytic_step(g, x, delta):
    """Full step ``sqrt(2 delta / g^T x) x`` of the quadratic model."""
    gx = float(np.dot(g, x))
    if not gx > DEGENERATE_TOL:
        raise DegenerateDirectionError(f"g^T A^-1 g = {gx:.3e} is not positive")
    return np.sqrt(2.0 * delta / gx) * np.asarray(x, dtype=np.float64)


def backtrack_coefficients(config: TrustRegionConfig):
    start = 1 if config.strict_appendix_a else 0
    return [config.backtrack_ratio ** k for k in range(start, config.max_backtracks + 1)]


def solve_step(problem: TrustRegionProblem, config: Optional[TrustRegionConfig] = None):
    """Take one trust-region step; returns ``(theta_new, StepReport)``.

    When no candidate passes both tests, or there is no ascent direction,
    ``theta_old`` is returned unchanged with ``accepted=False``.
    """
    config = config or TrustRegionConfig()
    theta_old = np.asarray(problem.theta_old, dtype=np.float64)
    L_old, D_old = problem.eval_fn(theta_old)
    if abs(D_old) > 1e-10:
        raise ValueError(f"constraint at theta_old is {D_old:.3e}, expected 0")

    g = np.asarray(problem.gradient_fn(), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite objective gradient")

    idx = None
    n = problem.n_samples
    if n is not None and config.subsample_fraction < 1.0:
        rng = np.random.default_rng(config.seed)
        m = max(1, int(round(config.subsample_fraction * n)))
        idx = np.sort(rng.choice(n, size=m, replace=False))

    def reject(reason, residual=float("nan")):
        return theta_old.copy(), StepReport(
            accepted=False, backtracks_used=0, step_norm=0.0,
            objective_before=float(L_old), objective_after=float(L_old),
            constraint_after=0.0, cg_residual=residual, reason=reason)

    x, residual = conjugate_gradient(
        lambda v: problem.curvature_vp_fn(idx, v), g, config.cg_iters, config.damping)
    try:
        full_step = analytic_step(g, x, problem.delta)
    except DegenerateDirectionError:
        return reject("degenerate direction", residual)

    limit = problem.delta + config.constraint_slack
    tried = 0
    for coef in backtrack_coefficients(config):
        theta = theta_old + coef * full_step
        tried += 1
        L_new, D_new = problem.eval_fn(theta)
        if not (np.isfinite(L_new) and np.isfinite(D_new)):
            continue
        if L_new >= L_old and D_new <= limit:
            return theta, StepReport(
                accepted=True, backtracks_used=tried - 1,
                step_norm=float(np.linalg.norm(theta - theta_old)),
                objective_before=float(L_old), objective_after=float(L_new),
                constraint_after=float(D_new), cg_residual=residual)
    theta_old_copy, report = reject("line search exhausted", residual)
    report.backtracks_used = tried
    return theta_old_copy, report
