"""Linear mixed biomarker submodel.

The mean combines baseline covariates, a global time slope, and one
slope per treatment applied to the time spent on that treatment, so the
trajectory bends at the decision time without jumping.  A random
intercept and slope are shared with the hazard model.

The marginal likelihood is evaluated from per-subject sufficient
statistics: with only two random effects, each subject's contribution
reduces to 2x2 algebra after caching cross-moments of the design,
which makes the fit essentially independent of the measurement count.
Tests pin this reduction against a dense multivariate-normal oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import DataError, EvaluationError, FitError
from .model import DesignConfig, SubjectRecord, Theta

__all__ = [
    "SubjectDesign",
    "build_subject_design",
    "lmm_conditional_logdensity",
    "lmm_marginal_loglik",
    "LmmFit",
    "fit_lmm",
    "empirical_bayes",
    "theta_lmm_parts",
]

_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class SubjectDesign:
    """Fixed and random design for one subject's measurement series."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]


def longitudinal_design_rows(
    ts_scaled: np.ndarray,
    x0: Sequence[float],
    v1: str,
    v2: str | None,
    cfg: DesignConfig,
) -> np.ndarray:
    """Fixed-effect rows [1, x0..., t, exposures...] at scaled times."""
    ts_scaled = np.asarray(ts_scaled, dtype=float)
    tau_s = cfg.tau_scaled
    pre = np.minimum(ts_scaled, tau_s)
    post = np.maximum(ts_scaled - tau_s, 0.0)
    cols = [np.ones_like(ts_scaled)]
    for j in range(cfg.n_baseline_covariates):
        cols.append(np.full_like(ts_scaled, float(x0[j])))
    cols.append(ts_scaled)
    for lab in cfg.longitudinal_treatments():
        expo = np.zeros_like(ts_scaled)
        if v1 == lab:
            expo = expo + pre
        if v2 == lab:
            expo = expo + post
        cols.append(expo)
    return np.column_stack(cols)


def build_subject_design(subject: SubjectRecord, cfg: DesignConfig) -> SubjectDesign:
    ts = np.asarray(subject.times, dtype=float) * cfg.time_scale
    if subject.v2 is None and np.any(ts > cfg.tau_scaled + 1e-12):
        raise DataError(
            f"subject {subject.subject_id}: measurements past the decision time "
            "require a stage-2 treatment"
        )
    X = longitudinal_design_rows(ts, subject.x0, subject.v1, subject.v2, cfg)
    Z = np.column_stack([np.ones_like(ts), ts])
    return SubjectDesign(y=np.asarray(subject.values, dtype=float), X=X, Z=Z)


def lmm_conditional_logdensity(
    y: np.ndarray,
    X: np.ndarray,
    Z: np.ndarray,
    b: tuple[float, float],
    beta: np.ndarray,
    sigma_eps: float,
) -> float:
    """Gaussian log-density of measurements given the random effects."""
    if sigma_eps <= 0.0:
        raise EvaluationError("sigma_eps must be positive")
    resid = y - X @ beta - Z @ np.asarray(b, dtype=float)
    n = y.shape[0]
    return float(
        -0.5 * n * (_LOG2PI + 2.0 * np.log(sigma_eps))
        - 0.5 * float(resid @ resid) / sigma_eps**2
    )


@dataclass
class _LmmMoments:
    """Per-subject cross-moments; everything the marginal loglik needs."""

    n: np.ndarray        # (m,) measurement counts
    yy: np.ndarray       # (m,) y'y
    Xy: np.ndarray       # (m, p) X'y
    XX: np.ndarray       # (m, p, p) X'X
    Zy: np.ndarray       # (m, 2) Z'y
    ZX: np.ndarray       # (m, 2, p) Z'X
    ZZ: np.ndarray       # (m, 2, 2) Z'Z


def _collect_moments(designs: Sequence[SubjectDesign]) -> _LmmMoments:
    n = np.array([d.n for d in designs], dtype=float)
    yy = np.array([d.y @ d.y for d in designs])
    Xy = np.stack([d.X.T @ d.y for d in designs])
    XX = np.stack([d.X.T @ d.X for d in designs])
    Zy = np.stack([d.Z.T @ d.y for d in designs])
    ZX = np.stack([d.Z.T @ d.X for d in designs])
    ZZ = np.stack([d.Z.T @ d.Z for d in designs])
    return _LmmMoments(n=n, yy=yy, Xy=Xy, XX=XX, Zy=Zy, ZX=ZX, ZZ=ZZ)


def _marginal_parts(
    mom: _LmmMoments, beta: np.ndarray, sigma_eps: float, G: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """Per-subject loglik pieces plus the 2x2 posterior precision data.

    Returns (loglik_i, M (m,2,2), Zr (m,2), rss (m,), logdetG).
    """
    s2 = sigma_eps**2
    det_g = float(np.linalg.det(G))
    if det_g <= 0.0:
        raise EvaluationError("random-effects covariance is not positive definite")
    g_inv = np.linalg.inv(G)
    logdet_g = float(np.log(det_g))

    rss = mom.yy - 2.0 * mom.Xy @ beta + np.einsum("i,mij,j->m", beta, mom.XX, beta)
    z_resid = mom.Zy - mom.ZX @ beta  # (m, 2)
    m_mat = g_inv[None, :, :] + mom.ZZ / s2  # (m, 2, 2)

    a = m_mat[:, 0, 0]
    bq = m_mat[:, 0, 1]
    c = m_mat[:, 1, 1]
    det_m = a * c - bq * bq
    if np.any(det_m <= 0.0):
        raise EvaluationError("posterior precision lost positive definiteness")
    # log|V| = n log s2 + log|G| + log|M|; quadratic via the Woodbury identity.
    logdet_v = mom.n * np.log(s2) + logdet_g + np.log(det_m)
    u0, u1 = z_resid[:, 0], z_resid[:, 1]
    quad_corr = (c * u0 * u0 - 2.0 * bq * u0 * u1 + a * u1 * u1) / det_m
    quad = rss / s2 - quad_corr / (s2 * s2)
    loglik_i = -0.5 * (mom.n * _LOG2PI + logdet_v + quad)
    return loglik_i, m_mat, z_resid, rss, logdet_g


def lmm_marginal_loglik(
    designs: Sequence[SubjectDesign],
    beta: np.ndarray,
    sigma_eps: float,
    G: np.ndarray,
) -> float:
    """Marginal log-likelihood with the random effects integrated out."""
    mom = _collect_moments(designs)
    loglik_i, *_ = _marginal_parts(mom, np.asarray(beta, dtype=float), sigma_eps, G)
    return float(np.sum(loglik_i))


@dataclass
class LmmFit:
    beta: np.ndarray
    sigma_eps: float
    G: np.ndarray
    loglik: float
    converged: bool
    n_iter: int


_WORK_BOUND_COEF = 20.0
_WORK_BOUND_LOG = (-8.0, 4.0)
_WORK_BOUND_ATANH = 5.0


def _lmm_pack(beta: np.ndarray, sb0: float, sb1: float, rho: float, se: float) -> np.ndarray:
    return np.concatenate(
        [beta, [np.log(sb0), np.log(sb1), np.arctanh(rho), np.log(se)]]
    )


def _lmm_unpack(w: np.ndarray, p: int):
    beta = w[:p]
    sb0, sb1 = np.exp(w[p]), np.exp(w[p + 1])
    rho = np.tanh(w[p + 2])
    se = np.exp(w[p + 3])
    cov = rho * sb0 * sb1
    G = np.array([[sb0**2, cov], [cov, sb1**2]])
    return beta, se, G, (sb0, sb1, rho)


def fit_lmm(
    data: Sequence[SubjectRecord], cfg: DesignConfig, maxiter: int = 500
) -> LmmFit:
    """Maximum-likelihood fit of the mixed model (no REML correction)."""
    if len(data) == 0:
        raise DataError("no subjects to fit")
    designs = [build_subject_design(s, cfg) for s in data]
    mom = _collect_moments(designs)
    p = designs[0].X.shape[1]

    xx = mom.XX.sum(axis=0)
    xy = mom.Xy.sum(axis=0)
    beta0, *_ = np.linalg.lstsq(xx, xy, rcond=None)
    total_n = float(mom.n.sum())
    rss0 = float(mom.yy.sum() - 2.0 * xy @ beta0 + beta0 @ xx @ beta0)
    s_tot = max(np.sqrt(rss0 / max(total_n, 1.0)), 1e-3)
    w0 = _lmm_pack(beta0, 0.5 * s_tot, 0.25 * s_tot, 0.0, 0.7 * s_tot)

    def objective(w: np.ndarray) -> float:
        beta, se, G, _ = _lmm_unpack(w, p)
        try:
            loglik_i, *_ = _marginal_parts(mom, beta, se, G)
        except EvaluationError:
            return 1e12
        total = float(np.sum(loglik_i))
        if not np.isfinite(total):
            return 1e12
        return -total

    bounds = (
        [(-_WORK_BOUND_COEF, _WORK_BOUND_COEF)] * p
        + [_WORK_BOUND_LOG, _WORK_BOUND_LOG]
        + [(-_WORK_BOUND_ATANH, _WORK_BOUND_ATANH)]
        + [_WORK_BOUND_LOG]
    )
    res = optimize.minimize(
        objective,
        w0,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-6, "maxcor": 10},
    )
    if not np.all(np.isfinite(res.x)):
        raise FitError("mixed-model optimization produced non-finite parameters")
    beta, se, G, _ = _lmm_unpack(res.x, p)
    loglik = -float(res.fun)
    return LmmFit(
        beta=beta,
        sigma_eps=float(se),
        G=G,
        loglik=loglik,
        converged=bool(res.success),
        n_iter=int(res.nit),
    )


def empirical_bayes(
    design: SubjectDesign, beta: np.ndarray, sigma_eps: float, G: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode and curvature of one subject's random effects.

    Under the mixed model alone the posterior is exactly Gaussian:
    mode (ZtZ/s2 + Ginv)^-1 Zt r / s2, curvature ZtZ/s2 + Ginv.
    """
    if sigma_eps <= 0.0:
        raise EvaluationError("sigma_eps must be positive")
    s2 = sigma_eps**2
    g_inv = np.linalg.inv(G)
    resid = design.y - design.X @ np.asarray(beta, dtype=float)
    curvature = design.Z.T @ design.Z / s2 + g_inv
    mode = np.linalg.solve(curvature, design.Z.T @ resid / s2)
    return mode, curvature


def theta_lmm_parts(
    theta: Theta, cfg: DesignConfig
) -> tuple[np.ndarray, float, np.ndarray]:
    """(beta vector in design order, sigma_eps, G) from a joint parameter set."""
    beta = np.concatenate(
        [
            [theta.beta0],
            np.asarray(theta.beta_x, dtype=float),
            [theta.beta_t],
            [theta.beta_for(lab) for lab in cfg.longitudinal_treatments()],
        ]
    )
    return beta, theta.sigma_eps, theta.G
