"""Regimen-value estimation by model standardization.

Given fitted (or true) joint-model parameters, the regimen-specific
survival curve is built in three steps: the response probability at the
decision time follows from the biomarker model's measurement-error
distribution; conditional on baseline covariates and random effects the
regimen survival curve is a response-weighted mixture of the two
treatment-sequence curves; and the marginal curve averages that mixture
over the random-effects distribution (Gauss-Hermite) and a supplied set
of baseline covariate vectors.  Restricted mean survival times are
trapezoid integrals of the marginal curve.

Sampling uncertainty is propagated by redrawing the fitted parameters
from their asymptotic normal distribution on the optimizer's working
scale and recomputing every regimen value per draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, EvaluationError
from .model import (
    DesignConfig,
    Dtr,
    Theta,
    _gamma_predictor_scaled,
    _latent_mean_scaled,
    latent_trajectory,
)
from .quadrature import gaussian_expectation_pairs, gk15_points, hermite_rule
from .survival import HazardContext, survival_function

__all__ = [
    "EstimandSpec",
    "RegimenValueTable",
    "response_probability",
    "regimen_conditional_survival",
    "marginal_survival",
    "marginal_rmst",
    "regimen_values",
    "propagate_uncertainty",
]

# An estimand is ("survival" | "rmst", horizon on the natural axis).
EstimandSpec = tuple[str, float]

_VALID_KINDS = ("survival", "rmst")


def _check_estimands(estimands: Sequence[EstimandSpec], cfg: DesignConfig) -> None:
    if not estimands:
        raise ConfigError("at least one estimand is required")
    for kind, horizon in estimands:
        if kind not in _VALID_KINDS:
            raise ConfigError(f"unknown estimand kind {kind!r}")
        if not (0.0 < horizon <= cfg.t_max):
            raise ConfigError(f"estimand horizon {horizon} outside (0, t_max]")


def response_probability(
    x0: Sequence[float],
    b: tuple[float, float],
    theta: Theta,
    g: Dtr,
    cfg: DesignConfig,
) -> float:
    """Probability that the measured biomarker drop reaches the threshold.

    The drop y(0) - y(tau) is Gaussian around m(0) - m(tau) with
    variance 2 * sigma_eps^2 from the two measurement errors.
    """
    m0 = latent_trajectory(0.0, x0, b, g.v1, g.v1, theta, cfg)
    m_tau = latent_trajectory(cfg.tau, x0, b, g.v1, g.v1, theta, cfg)
    z = (m0 - m_tau - cfg.response_threshold) / (np.sqrt(2.0) * theta.sigma_eps)
    return float(ndtr(z))


def regimen_conditional_survival(
    t: float,
    x0: Sequence[float],
    b: tuple[float, float],
    theta: Theta,
    g: Dtr,
    cfg: DesignConfig,
) -> float:
    """S_g(t | x0, b): response-mixture of the two sequence curves."""
    p = response_probability(x0, b, theta, g, cfg)
    ctx_r = HazardContext(x0=x0, b=b, v1=g.v1, v2=g.v2_responder, theta=theta, cfg=cfg)
    ctx_n = HazardContext(x0=x0, b=b, v1=g.v1, v2=g.v2_nonresponder, theta=theta, cfg=cfg)
    return p * survival_function(t, ctx_r) + (1.0 - p) * survival_function(t, ctx_n)


# -- vectorized marginal kernel ----------------------------------------


def _sequence_lp0(
    us: np.ndarray, tau_s: float, v1: str, v2: str, theta: Theta
) -> np.ndarray:
    """Linear predictor at zero covariates and zero random effects."""
    zero_x = np.zeros(len(theta.gamma_x))
    return _gamma_predictor_scaled(us, tau_s, zero_x, v1, v2, theta) + theta.alpha * (
        _latent_mean_scaled(us, tau_s, zero_x, (0.0, 0.0), v1, v2, theta)
    )


def _grid_panels(
    ts_scaled: np.ndarray, tau_s: float, n_post: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-grid-time Gauss-Kronrod nodes/weights, shape (G, n_nodes).

    Rows integrate over [0, t_k]: one panel to min(t_k, tau) and
    ``n_post`` panels beyond; weights are zero where a piece is empty.
    """
    base_nodes, base_weights = gk15_points(0.0, 1.0)
    g = ts_scaled.shape[0]
    cut = np.minimum(ts_scaled, tau_s)
    pieces_n = [cut[:, None] * base_nodes[None, :]]
    pieces_w = [cut[:, None] * base_weights[None, :]]
    post_len = np.maximum(ts_scaled - tau_s, 0.0) / n_post
    for j in range(n_post):
        start = tau_s + j * post_len
        pieces_n.append(start[:, None] + post_len[:, None] * base_nodes[None, :])
        pieces_w.append(post_len[:, None] * base_weights[None, :])
    nodes = np.concatenate(pieces_n, axis=1)
    weights = np.concatenate(pieces_w, axis=1)
    assert nodes.shape == (g, 15 * (1 + n_post))
    return nodes, weights


def _sequence_cumhaz_grid(
    ts_scaled: np.ndarray,
    b1: np.ndarray,
    v1: str,
    v2: str,
    theta: Theta,
    cfg: DesignConfig,
) -> np.ndarray:
    """Cumulative hazard Q[k, j] over [0, t_k] at slope effect b1[j].

    Covariates and the random intercept enter the hazard through a
    time-constant factor, so they are applied outside this kernel.
    """
    tau_s = cfg.tau_scaled
    nodes, weights = _grid_panels(ts_scaled, tau_s, cfg.gk_panels_post_tau)
    with np.errstate(divide="ignore"):
        log_h0 = (
            np.log(theta.lambda0)
            + np.log(theta.kappa)
            + (theta.kappa - 1.0) * np.log(nodes)
        )
    log_h0 = np.where(nodes > 0.0, log_h0, -np.inf)
    lp0 = _sequence_lp0(nodes, tau_s, v1, v2, theta)
    # (G, U, J): guard the predictor magnitude before exponentiating.
    lin = lp0[:, :, None] + theta.alpha * b1[None, None, :] * nodes[:, :, None]
    if np.any(np.abs(lin) > cfg.eta_bound):
        raise EvaluationError("hazard linear predictor exceeded the trusted range")
    integrand = np.exp(log_h0[:, :, None] + lin)
    q = np.einsum("gu,guj->gj", weights, integrand)
    return q


def _response_probs(
    b1: np.ndarray, v1: str, theta: Theta, cfg: DesignConfig
) -> np.ndarray:
    tau_s = cfg.tau_scaled
    drop = -(theta.beta_t + theta.beta_for(v1) + b1) * tau_s
    z = (drop - cfg.response_threshold) / (np.sqrt(2.0) * theta.sigma_eps)
    return ndtr(z)


def marginal_survival_curve(
    ts: np.ndarray,
    baselines: np.ndarray,
    theta: Theta,
    g: Dtr,
    cfg: DesignConfig,
    k_nodes: int = 3,
) -> np.ndarray:
    """Marginal S_g over a grid of natural-axis times.

    ``baselines`` is an (N, n_x) array of covariate vectors; the curve
    averages the random-effects-integrated conditional curve over its
    rows with equal weight.
    """
    ts = np.asarray(ts, dtype=float)
    if np.any(ts < 0.0):
        raise EvaluationError("survival times must be nonnegative")
    baselines = np.atleast_2d(np.asarray(baselines, dtype=float))
    rule = hermite_rule(k_nodes)
    b_nodes, b_weights = gaussian_expectation_pairs(theta.G, rule)
    b0 = b_nodes[:, 0]
    b1 = b_nodes[:, 1]

    ts_scaled = ts * cfg.time_scale
    q_resp = _sequence_cumhaz_grid(ts_scaled, b1, g.v1, g.v2_responder, theta, cfg)
    q_nonr = _sequence_cumhaz_grid(ts_scaled, b1, g.v1, g.v2_nonresponder, theta, cfg)
    p_resp = _response_probs(b1, g.v1, theta, cfg)

    # Subject-level multiplier on the cumulative hazard.
    lin = (
        baselines @ np.asarray(theta.gamma_x, dtype=float)
        + theta.alpha * (baselines @ np.asarray(theta.beta_x, dtype=float))
    )
    scale = np.exp(lin[:, None] + theta.alpha * b0[None, :])  # (N, J)

    curve = np.zeros(ts.shape[0])
    for j in range(b_nodes.shape[0]):
        s_resp = np.exp(-np.outer(scale[:, j], q_resp[:, j])).mean(axis=0)
        s_nonr = np.exp(-np.outer(scale[:, j], q_nonr[:, j])).mean(axis=0)
        curve += b_weights[j] * (p_resp[j] * s_resp + (1.0 - p_resp[j]) * s_nonr)
    return curve


def marginal_survival(
    t: float,
    baselines: np.ndarray,
    theta: Theta,
    g: Dtr,
    cfg: DesignConfig,
    k_nodes: int = 3,
) -> float:
    """Marginal regimen survival probability at one time."""
    return float(
        marginal_survival_curve(np.asarray([t]), baselines, theta, g, cfg, k_nodes)[0]
    )


def marginal_rmst(
    t_star: float,
    baselines: np.ndarray,
    theta: Theta,
    g: Dtr,
    cfg: DesignConfig,
    k_nodes: int = 3,
    grid_size: int = 100,
) -> float:
    """Restricted mean survival time over [0, t_star] (trapezoid rule)."""
    if grid_size < 2:
        raise ConfigError("grid_size must be at least 2")
    grid = np.linspace(0.0, t_star, grid_size)
    curve = marginal_survival_curve(grid, baselines, theta, g, cfg, k_nodes)
    return float(np.trapezoid(curve, grid))


# -- tables and uncertainty propagation --------------------------------


@dataclass
class RegimenValueTable:
    """Point values (and optionally covariances) per estimand and regimen."""

    dtr_labels: tuple[str, ...]
    estimands: tuple[EstimandSpec, ...]
    values: dict[EstimandSpec, np.ndarray]
    cov: dict[EstimandSpec, np.ndarray] | None = None
    n_draws: int = 0
    n_redrawn: int = 0

    def se(self, estimand: EstimandSpec) -> np.ndarray:
        if self.cov is None:
            raise ConfigError("no covariance attached to this table")
        return np.sqrt(np.clip(np.diag(self.cov[estimand]), 0.0, None))


def _union_grid(estimands: Sequence[EstimandSpec], grid_size: int) -> np.ndarray:
    """Shared evaluation grid holding every estimand's own grid."""
    points: list[np.ndarray] = []
    for kind, horizon in estimands:
        if kind == "rmst":
            points.append(np.linspace(0.0, horizon, grid_size))
        else:
            points.append(np.asarray([horizon]))
    return np.unique(np.concatenate(points))


def _values_from_curve(
    grid: np.ndarray, curve: np.ndarray, estimands: Sequence[EstimandSpec], grid_size: int
) -> dict[EstimandSpec, float]:
    out: dict[EstimandSpec, float] = {}
    for kind, horizon in estimands:
        if kind == "survival":
            idx = int(np.searchsorted(grid, horizon))
            out[(kind, horizon)] = float(curve[idx])
        else:
            own = np.linspace(0.0, horizon, grid_size)
            idx = np.searchsorted(grid, own)
            out[(kind, horizon)] = float(np.trapezoid(curve[idx], own))
    return out


def regimen_values(
    theta: Theta,
    baselines: np.ndarray,
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
    k_nodes: int = 3,
    grid_size: int = 100,
) -> RegimenValueTable:
    """Plug-in regimen values for every embedded regimen."""
    _check_estimands(estimands, cfg)
    dtrs = cfg.embedded_dtrs()
    grid = _union_grid(estimands, grid_size)
    values = {spec: np.empty(len(dtrs)) for spec in estimands}
    for gi, g in enumerate(dtrs):
        curve = marginal_survival_curve(grid, baselines, theta, g, cfg, k_nodes)
        got = _values_from_curve(grid, curve, estimands, grid_size)
        for spec in estimands:
            values[spec][gi] = got[spec]
    return RegimenValueTable(
        dtr_labels=tuple(d.label for d in dtrs),
        estimands=tuple(estimands),
        values=values,
    )


def propagate_uncertainty(
    fit,
    baselines: np.ndarray,
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
    rng: np.random.Generator,
    n_draws: int = 300,
    k_nodes: int = 3,
    grid_size: int = 100,
) -> RegimenValueTable:
    """Regimen values with a parameter-uncertainty covariance.

    Parameters are redrawn from N(theta_hat, vcov) on the working scale
    (keeping every draw inside the valid domain), and the regimen values
    are recomputed per draw.  Draws whose values cannot be evaluated are
    replaced, up to ten times the requested count.
    """
    if n_draws < 2:
        raise ConfigError("n_draws must be at least 2")
    _check_estimands(estimands, cfg)
    table = regimen_values(fit.theta_hat, baselines, estimands, cfg, k_nodes, grid_size)
    layout = fit.layout
    center = np.asarray(fit.theta_working, dtype=float)
    cov_w = np.asarray(fit.vcov_working, dtype=float)
    # Draw through an eigen square root so semidefinite covariances work.
    evals, evecs = np.linalg.eigh(0.5 * (cov_w + cov_w.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))

    dtrs = cfg.embedded_dtrs()
    m = len(dtrs)
    grid = _union_grid(estimands, grid_size)
    draws = {spec: np.empty((n_draws, m)) for spec in estimands}
    accepted = 0
    attempts = 0
    max_attempts = 10 * n_draws
    while accepted < n_draws:
        if attempts >= max_attempts:
            raise EvaluationError(
                f"exceeded {max_attempts} parameter draws while propagating uncertainty"
            )
        attempts += 1
        z = rng.standard_normal(center.shape[0])
        theta_draw = layout.from_working(center + root @ z)
        try:
            for gi, g in enumerate(dtrs):
                curve = marginal_survival_curve(grid, baselines, theta_draw, g, cfg, k_nodes)
                got = _values_from_curve(grid, curve, estimands, grid_size)
                for spec in estimands:
                    draws[spec][accepted, gi] = got[spec]
        except EvaluationError:
            continue
        accepted += 1

    cov = {
        spec: np.atleast_2d(np.cov(draws[spec], rowvar=False, ddof=1))
        for spec in estimands
    }
    table.cov = cov
    table.n_draws = n_draws
    table.n_redrawn = attempts - n_draws
    return table
