"""Event-time submodel: Weibull baseline with a biomarker-linked predictor.

The hazard is h(t) = lambda0 * kappa * u^(kappa-1) * exp(eta(u)) where
u = t * time_scale and eta is the linear predictor from ``model``.  The
cumulative hazard is integrated piecewise with the 15-point
Gauss-Kronrod rule: one panel before the decision time and a
configurable number of panels after it, so the predictor's slope change
at tau never sits inside a panel.

Log-densities are taken with respect to the scaled time measure; this
shifts the log-likelihood by a data-independent constant and leaves
estimates, standard errors, and likelihood ratios unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EvaluationError
from .model import DesignConfig, Theta, _gamma_predictor_scaled, _latent_mean_scaled
from .quadrature import gk15_points

__all__ = [
    "HazardContext",
    "baseline_hazard",
    "log_baseline_hazard",
    "hazard_design_rows",
    "cumulative_hazard",
    "survival_logdensity",
    "survival_function",
]


def hazard_design_rows(
    ts_scaled: np.ndarray,
    x0: Sequence[float],
    v1: str,
    v2: str | None,
    cfg: DesignConfig,
) -> np.ndarray:
    """Hazard regression rows at scaled times.

    Columns: baseline covariates, one pre-decision exposure per
    non-reference stage-1 label, one post-decision exposure per
    non-reference treatment sequence.  With ``v2`` absent the sequence
    columns are zero, which is only valid up to the decision time.
    """
    ts = np.asarray(ts_scaled, dtype=float)
    tau_s = cfg.tau_scaled
    pre = np.minimum(ts, tau_s)
    post = np.maximum(ts - tau_s, 0.0)
    zero = np.zeros_like(ts)
    cols = [np.full_like(ts, float(x0[j])) for j in range(cfg.n_baseline_covariates)]
    for lab in cfg.survival_stage1_treatments():
        cols.append(pre if v1 == lab else zero)
    seq = None if v2 is None else v1 + v2
    for lab in cfg.survival_sequences():
        cols.append(post if seq == lab else zero)
    return np.column_stack(cols)


@dataclass
class HazardContext:
    """Everything needed to evaluate one subject's hazard path."""

    x0: Sequence[float]
    b: tuple[float, float]
    v1: str
    v2: str | None
    theta: Theta
    cfg: DesignConfig


def baseline_hazard(t, lambda0: float, kappa: float):
    """Weibull baseline lambda0 * kappa * t^(kappa-1) on the scaled axis.

    ``t`` must be strictly positive: for kappa < 1 the hazard diverges
    at zero, and the zero-time limit is left to callers that know their
    shape parameter.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0.0):
        raise EvaluationError("baseline hazard requires strictly positive time")
    if lambda0 <= 0.0 or kappa <= 0.0:
        raise EvaluationError("Weibull parameters must be positive")
    out = lambda0 * kappa * t_arr ** (kappa - 1.0)
    return float(out) if t_arr.ndim == 0 else out


def log_baseline_hazard(t, lambda0: float, kappa: float):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0.0):
        raise EvaluationError("baseline hazard requires strictly positive time")
    if lambda0 <= 0.0 or kappa <= 0.0:
        raise EvaluationError("Weibull parameters must be positive")
    out = np.log(lambda0) + np.log(kappa) + (kappa - 1.0) * np.log(t_arr)
    return float(out) if t_arr.ndim == 0 else out


def _eta_scaled(us: np.ndarray, ctx: HazardContext) -> np.ndarray:
    tau_s = ctx.cfg.tau_scaled
    x0v = np.asarray(ctx.x0, dtype=float)
    eta = _gamma_predictor_scaled(us, tau_s, x0v, ctx.v1, ctx.v2, ctx.theta)
    eta = eta + ctx.theta.alpha * _latent_mean_scaled(
        us, tau_s, x0v, ctx.b, ctx.v1, ctx.v2, ctx.theta
    )
    bound = ctx.cfg.eta_bound
    if np.any(np.abs(eta) > bound):
        raise EvaluationError(
            f"hazard linear predictor exceeded +-{bound}; parameters out of the trusted range"
        )
    return eta


def hazard_panels_scaled(
    t_scaled: float, tau_scaled: float, n_post: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Kronrod nodes/weights covering [0, t] on the scaled axis.

    One panel spans [0, min(t, tau)]; the remainder (if any) is split
    into ``n_post`` equal panels.  Returned weights integrate du.
    """
    cut = min(t_scaled, tau_scaled)
    nodes, weights = gk15_points(0.0, cut)
    if t_scaled > tau_scaled:
        edges = np.linspace(tau_scaled, t_scaled, n_post + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            n2, w2 = gk15_points(float(a), float(b))
            nodes = np.concatenate([nodes, n2])
            weights = np.concatenate([weights, w2])
    return nodes, weights


def cumulative_hazard(t: float, ctx: HazardContext) -> float:
    """Integrated hazard over [0, t] (natural-axis ``t``)."""
    if t < 0.0:
        raise EvaluationError("cumulative hazard requires t >= 0")
    if t == 0.0:
        return 0.0
    cfg = ctx.cfg
    ts = t * cfg.time_scale
    if ts > cfg.tau_scaled and ctx.v2 is None:
        raise EvaluationError("stage-2 treatment required to integrate past the decision time")
    us, ws = hazard_panels_scaled(ts, cfg.tau_scaled, cfg.gk_panels_post_tau)
    theta = ctx.theta
    log_h0 = np.log(theta.lambda0) + np.log(theta.kappa) + (theta.kappa - 1.0) * np.log(us)
    vals = np.exp(log_h0 + _eta_scaled(us, ctx))
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("non-finite hazard value inside the cumulative-hazard integral")
    return float(np.dot(ws, vals))


def survival_logdensity(t: float, event: bool, ctx: HazardContext) -> float:
    """Log-density of an event (or censoring) observation at time ``t``.

    Events contribute log h(t) - H(t); censorings contribute -H(t).
    """
    if t <= 0.0:
        raise EvaluationError("event/censoring time must be positive")
    contrib = -cumulative_hazard(t, ctx)
    if event:
        theta = ctx.theta
        ts = t * ctx.cfg.time_scale
        log_h = (
            np.log(theta.lambda0)
            + np.log(theta.kappa)
            + (theta.kappa - 1.0) * np.log(ts)
            + float(_eta_scaled(np.asarray([ts]), ctx)[0])
        )
        contrib += log_h
    return float(contrib)


def survival_function(t: float, ctx: HazardContext) -> float:
    """S(t) = exp(-H(t)) for one subject under a fixed treatment path."""
    return float(np.exp(-cumulative_hazard(t, ctx)))
