"""Maximum-likelihood fitting of the joint biomarker-survival model.

The observed-data likelihood integrates the two random effects out of
the product of the measurement density, the event-time density, and the
random-effects density.  Each subject gets a fixed integration plan:
Gauss-Hermite nodes recentered at the empirical Bayes summary from a
preliminary mixed-model fit.  The integral then becomes a weighted sum
over node columns, and both the log-likelihood and its exact gradient
are evaluated with dense array arithmetic across all subjects at once.

Optimization runs on a transformed ("working") scale where positive
parameters are logged and the correlation is arc-tangent transformed,
with wide box bounds as a safety net.  Standard errors come from the
observed information, obtained by differencing the analytic score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import (
    DataError,
    EvaluationError,
    FitError,
    InitializationError,
)
from .longitudinal import (
    LmmFit,
    SubjectDesign,
    build_subject_design,
    empirical_bayes,
    fit_lmm,
    lmm_conditional_logdensity,
    longitudinal_design_rows,
    theta_lmm_parts,
)
from .model import DesignConfig, SubjectRecord, Theta
from .quadrature import gk15_points, hermite_rule, pseudo_adaptive_nodes
from .survival import HazardContext, hazard_design_rows, survival_logdensity

__all__ = [
    "ParamLayout",
    "QuadraturePlans",
    "build_quadrature_plans",
    "complete_data_loglik",
    "observed_loglik",
    "observed_score",
    "initialize_theta",
    "InitialValues",
    "FitOptions",
    "FitResult",
    "fit_joint_model",
    "observed_information",
]

_LOG2PI = float(np.log(2.0 * np.pi))

_BOUND_COEF = 20.0
_BOUND_LOG = (-8.0, 4.0)
_BOUND_ATANH = 5.0


class ParamLayout:
    """Flat vector layout of the joint model parameters.

    The order is: intercept, baseline effects, time slope, one slope per
    longitudinal treatment label, the four variance-component entries
    (two standard deviations, correlation, residual scale), the baseline
    hazard scale and shape, the hazard covariate effects, the stage-wise
    hazard exposures, and the association coefficient.

    ``natural`` coordinates are the parameters themselves; ``working``
    coordinates log the positive ones and arc-tanh the correlation so an
    unconstrained optimizer stays in the valid region.
    """

    def __init__(self, cfg: DesignConfig):
        self.cfg = cfg
        nx = cfg.n_baseline_covariates
        self.long_labels = list(cfg.longitudinal_treatments())
        self.stage1_labels = list(cfg.survival_stage1_treatments())
        self.sequence_labels = list(cfg.survival_sequences())

        names: list[str] = ["beta0"]
        names += [f"beta_x{j + 1:02d}" for j in range(nx)]
        names += ["beta_t"]
        names += [f"beta_{lab}" for lab in self.long_labels]
        names += ["sigma_b0", "sigma_b1", "rho", "sigma_eps", "lambda0", "kappa"]
        names += [f"gamma_x{j + 1:02d}" for j in range(nx)]
        names += [f"gamma_{lab}" for lab in self.stage1_labels]
        names += [f"gamma_{lab}" for lab in self.sequence_labels]
        names += ["alpha"]
        self.names: tuple[str, ...] = tuple(names)
        self._index = {name: i for i, name in enumerate(names)}

        n_beta = 2 + nx + len(self.long_labels)
        n_gamma = nx + len(self.stage1_labels) + len(self.sequence_labels)
        self.beta_slice = slice(0, n_beta)
        g_start = n_beta + 6
        self.gamma_slice = slice(g_start, g_start + n_gamma)
        self.i_sigma_b0 = self._index["sigma_b0"]
        self.i_sigma_b1 = self._index["sigma_b1"]
        self.i_rho = self._index["rho"]
        self.i_sigma_eps = self._index["sigma_eps"]
        self.i_lambda0 = self._index["lambda0"]
        self.i_kappa = self._index["kappa"]
        self.i_alpha = self._index["alpha"]

        transforms = ["identity"] * len(names)
        for name in ("sigma_b0", "sigma_b1", "sigma_eps", "lambda0", "kappa"):
            transforms[self._index[name]] = "log"
        transforms[self._index["rho"]] = "atanh"
        self.transforms: tuple[str, ...] = tuple(transforms)
        self._log_idx = np.array(
            [i for i, t in enumerate(transforms) if t == "log"], dtype=int
        )
        self._atanh_idx = np.array(
            [i for i, t in enumerate(transforms) if t == "atanh"], dtype=int
        )

    @property
    def n_params(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    # -- theta <-> natural vector --------------------------------------

    def to_natural(self, theta: Theta) -> np.ndarray:
        cfg = self.cfg
        beta_lmm, _, _ = theta_lmm_parts(theta, cfg)
        vec = np.empty(self.n_params)
        vec[self.beta_slice] = beta_lmm
        vec[self.i_sigma_b0] = theta.sigma_b0
        vec[self.i_sigma_b1] = theta.sigma_b1
        vec[self.i_rho] = theta.rho
        vec[self.i_sigma_eps] = theta.sigma_eps
        vec[self.i_lambda0] = theta.lambda0
        vec[self.i_kappa] = theta.kappa
        gamma = list(np.asarray(theta.gamma_x, dtype=float))
        gamma += [theta.gamma1_for(lab) for lab in self.stage1_labels]
        gamma += [float(theta.gamma_stage2.get(lab, 0.0)) for lab in self.sequence_labels]
        vec[self.gamma_slice] = gamma
        vec[self.i_alpha] = theta.alpha
        return vec

    def from_natural(self, vec: np.ndarray) -> Theta:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise EvaluationError(
                f"expected a parameter vector of length {self.n_params}"
            )
        nx = self.cfg.n_baseline_covariates
        beta = vec[self.beta_slice]
        gamma = vec[self.gamma_slice]
        n1 = len(self.stage1_labels)
        return Theta(
            beta0=float(beta[0]),
            beta_x=tuple(float(v) for v in beta[1 : 1 + nx]),
            beta_t=float(beta[1 + nx]),
            beta_trt={
                lab: float(beta[2 + nx + j]) for j, lab in enumerate(self.long_labels)
            },
            sigma_b0=float(vec[self.i_sigma_b0]),
            sigma_b1=float(vec[self.i_sigma_b1]),
            rho=float(vec[self.i_rho]),
            sigma_eps=float(vec[self.i_sigma_eps]),
            lambda0=float(vec[self.i_lambda0]),
            kappa=float(vec[self.i_kappa]),
            gamma_x=tuple(float(v) for v in gamma[:nx]),
            gamma_stage1={
                lab: float(gamma[nx + j]) for j, lab in enumerate(self.stage1_labels)
            },
            gamma_stage2={
                lab: float(gamma[nx + n1 + j])
                for j, lab in enumerate(self.sequence_labels)
            },
            alpha=float(vec[self.i_alpha]),
        )

    # -- natural <-> working -------------------------------------------

    def working_from_natural(self, nat: np.ndarray) -> np.ndarray:
        w = np.asarray(nat, dtype=float).copy()
        if np.any(w[self._log_idx] <= 0.0):
            raise EvaluationError("positive parameter is not positive")
        w[self._log_idx] = np.log(w[self._log_idx])
        w[self._atanh_idx] = np.arctanh(w[self._atanh_idx])
        return w

    def natural_from_working(self, work: np.ndarray) -> np.ndarray:
        nat = np.asarray(work, dtype=float).copy()
        nat[self._log_idx] = np.exp(nat[self._log_idx])
        nat[self._atanh_idx] = np.tanh(nat[self._atanh_idx])
        return nat

    def jacobian(self, work: np.ndarray) -> np.ndarray:
        """d(natural)/d(working), a diagonal stored as a vector."""
        work = np.asarray(work, dtype=float)
        jac = np.ones_like(work)
        jac[self._log_idx] = np.exp(work[self._log_idx])
        jac[self._atanh_idx] = 1.0 / np.cosh(work[self._atanh_idx]) ** 2
        return jac

    def to_working(self, theta: Theta) -> np.ndarray:
        return self.working_from_natural(self.to_natural(theta))

    def from_working(self, work: np.ndarray) -> Theta:
        return self.from_natural(self.natural_from_working(work))

    def bounds(self) -> list[tuple[float, float]]:
        out: list[tuple[float, float]] = []
        for t in self.transforms:
            if t == "log":
                out.append(_BOUND_LOG)
            elif t == "atanh":
                out.append((-_BOUND_ATANH, _BOUND_ATANH))
            else:
                out.append((-_BOUND_COEF, _BOUND_COEF))
        return out

    def clip_to_bounds(self, work: np.ndarray) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds()])
        hi = np.array([b[1] for b in self.bounds()])
        return np.clip(work, lo, hi)


# -- integration plans --------------------------------------------------


@dataclass
class QuadraturePlans:
    """Per-subject random-effect nodes and log-weights, stacked."""

    nodes: np.ndarray        # (n_subjects, n_nodes, 2)
    log_weights: np.ndarray  # (n_subjects, n_nodes)
    k_nodes: int

    @property
    def n_subjects(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_points(self) -> int:
        return self.nodes.shape[1]


def build_quadrature_plans(
    data: Sequence[SubjectRecord],
    beta: np.ndarray,
    sigma_eps: float,
    G: np.ndarray,
    cfg: DesignConfig,
    k_nodes: int = 5,
) -> QuadraturePlans:
    """Recentre a tensor Hermite rule at each subject's posterior summary.

    The mode and curvature come from the measurement submodel alone, so
    the plans stay fixed while the joint parameters move.
    """
    rule = hermite_rule(k_nodes)
    nodes = []
    log_w = []
    for subject in data:
        design = build_subject_design(subject, cfg)
        mode, curvature = empirical_bayes(design, beta, sigma_eps, G)
        plan = pseudo_adaptive_nodes(mode, curvature, rule)
        nodes.append(plan.nodes)
        log_w.append(plan.log_weights)
    return QuadraturePlans(
        nodes=np.stack(nodes), log_weights=np.stack(log_w), k_nodes=k_nodes
    )


# -- complete-data likelihood (reference form) ---------------------------


def complete_data_loglik(
    subject: SubjectRecord,
    b: tuple[float, float],
    theta: Theta,
    cfg: DesignConfig,
) -> float:
    """Joint log-density of one subject's data and random effects.

    Composes the measurement, event-time, and random-effect densities
    exactly as the submodules define them; the vectorized machinery is
    tested against this sum.
    """
    design = build_subject_design(subject, cfg)
    beta, sigma_eps, G = theta_lmm_parts(theta, cfg)
    ll_y = lmm_conditional_logdensity(design.y, design.X, design.Z, b, beta, sigma_eps)
    ctx = HazardContext(
        x0=subject.x0, b=b, v1=subject.v1, v2=subject.v2, theta=theta, cfg=cfg
    )
    ll_t = survival_logdensity(subject.obs_time, subject.event, ctx)
    bv = np.asarray(b, dtype=float)
    det_g = float(np.linalg.det(G))
    if det_g <= 0.0:
        raise EvaluationError("random-effects covariance is not positive definite")
    quad = float(bv @ np.linalg.solve(G, bv))
    ll_b = -_LOG2PI - 0.5 * math.log(det_g) - 0.5 * quad
    return ll_y + ll_t + ll_b


# -- stacked data arrays -------------------------------------------------


class JointCache:
    """All design arrays the likelihood needs, stacked over subjects.

    Integration nodes for the cumulative hazard are padded to a common
    width with zero weights so every subject occupies the same slab.
    """

    def __init__(self, data: Sequence[SubjectRecord], cfg: DesignConfig):
        if len(data) == 0:
            raise DataError("no subjects to fit")
        for subject in data:
            subject.validate(cfg)
        self.cfg = cfg
        self.n_subjects = len(data)
        scale = cfg.time_scale
        tau_s = cfg.tau_scaled
        n_post = cfg.gk_panels_post_tau

        designs = [build_subject_design(s, cfg) for s in data]
        self.y = np.concatenate([d.y for d in designs])
        self.Xl = np.vstack([d.X for d in designs])
        self.t_obs = np.concatenate([d.Z[:, 1] for d in designs])
        self.n_obs_per = np.array([d.n for d in designs], dtype=int)
        self.obs_starts = np.concatenate(
            [[0], np.cumsum(self.n_obs_per)[:-1]]
        ).astype(int)

        n = self.n_subjects
        width = 15 * (1 + n_post)
        self.T = np.array([s.obs_time * scale for s in data])
        self.log_T = np.log(self.T)
        self.delta = np.array([1.0 if s.event else 0.0 for s in data])
        self.u = np.ones((n, width))
        self.w = np.zeros((n, width))
        p_l = self.Xl.shape[1]
        first = hazard_design_rows(
            np.array([0.5]), data[0].x0, data[0].v1, data[0].v2, cfg
        )
        p_g = first.shape[1]
        self.Xl_u = np.zeros((n, width, p_l))
        self.Xg_u = np.zeros((n, width, p_g))
        self.Xl_T = np.zeros((n, p_l))
        self.Xg_T = np.zeros((n, p_g))

        for i, subject in enumerate(data):
            t_end = self.T[i]
            pre_end = min(t_end, tau_s)
            us, ws = gk15_points(0.0, pre_end)
            if t_end > tau_s:
                edges = np.linspace(tau_s, t_end, n_post + 1)
                for a, bnd in zip(edges[:-1], edges[1:]):
                    u2, w2 = gk15_points(a, bnd)
                    us = np.concatenate([us, u2])
                    ws = np.concatenate([ws, w2])
            k = us.shape[0]
            self.u[i, :k] = us
            self.w[i, :k] = ws
            self.Xl_u[i, :k] = longitudinal_design_rows(
                us, subject.x0, subject.v1, subject.v2, cfg
            )
            self.Xg_u[i, :k] = hazard_design_rows(
                us, subject.x0, subject.v1, subject.v2, cfg
            )
            self.Xl_T[i] = longitudinal_design_rows(
                np.array([t_end]), subject.x0, subject.v1, subject.v2, cfg
            )[0]
            self.Xg_T[i] = hazard_design_rows(
                np.array([t_end]), subject.x0, subject.v1, subject.v2, cfg
            )[0]

        self.log_u = np.log(self.u)
        self.active = self.w > 0.0
        self.n_events = int(self.delta.sum())


def _unpack(nat: np.ndarray, layout: ParamLayout):
    beta = nat[layout.beta_slice]
    gamma = nat[layout.gamma_slice]
    sb0 = nat[layout.i_sigma_b0]
    sb1 = nat[layout.i_sigma_b1]
    rho = nat[layout.i_rho]
    se = nat[layout.i_sigma_eps]
    lam = nat[layout.i_lambda0]
    kap = nat[layout.i_kappa]
    alpha = nat[layout.i_alpha]
    return beta, gamma, sb0, sb1, rho, se, lam, kap, alpha


def _core(
    cache: JointCache,
    plans: QuadraturePlans,
    nat: np.ndarray,
    layout: ParamLayout,
    want_score: bool,
) -> tuple[float, np.ndarray | None]:
    """Observed log-likelihood and, optionally, its natural-scale gradient."""
    beta, gamma, sb0, sb1, rho, se, lam, kap, alpha = _unpack(nat, layout)
    if min(sb0, sb1, se, lam, kap) <= 0.0 or not (-1.0 < rho < 1.0):
        raise EvaluationError("variance or shape parameter out of range")
    cfg = cache.cfg
    b0r = plans.nodes[:, :, 0]
    b1r = plans.nodes[:, :, 1]

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        # Measurement part.
        resid0 = cache.y - cache.Xl @ beta
        b0_obs = np.repeat(b0r, cache.n_obs_per, axis=0)
        b1_obs = np.repeat(b1r, cache.n_obs_per, axis=0)
        resid = resid0[:, None] - b0_obs - b1_obs * cache.t_obs[:, None]
        rss = np.add.reduceat(resid * resid, cache.obs_starts, axis=0)
        ll_y = (
            -0.5 * cache.n_obs_per[:, None] * (_LOG2PI + 2.0 * np.log(se))
            - 0.5 * rss / se**2
        )

        # Event part.
        m_fix_u = cache.Xl_u @ beta
        eta_fix_u = cache.Xg_u @ gamma + alpha * m_fix_u
        m_rand_u = b0r[:, None, :] + b1r[:, None, :] * cache.u[:, :, None]
        eta_u = eta_fix_u[:, :, None] + alpha * m_rand_u
        eta_T = cache.Xg_T @ gamma + alpha * (cache.Xl_T @ beta)
        m_T_rand = b0r + b1r * cache.T[:, None]
        eta_T_full = eta_T[:, None] + alpha * m_T_rand

        bound = cfg.eta_bound
        masked = np.abs(eta_u) * cache.active[:, :, None]
        if masked.max() > bound or np.abs(eta_T_full).max() > bound:
            raise EvaluationError("hazard linear predictor exceeded its bound")

        log_h0_u = np.log(lam * kap) + (kap - 1.0) * cache.log_u
        wh = cache.w[:, :, None] * np.exp(log_h0_u[:, :, None] + eta_u)
        H = wh.sum(axis=1)
        log_h_T = np.log(lam * kap) + (kap - 1.0) * cache.log_T[:, None] + eta_T_full
        ll_t = cache.delta[:, None] * log_h_T - H

        # Random-effects part.
        one_m_r2 = 1.0 - rho * rho
        det_g = sb0 * sb0 * sb1 * sb1 * one_m_r2
        e00 = 1.0 / (sb0 * sb0 * one_m_r2)
        e11 = 1.0 / (sb1 * sb1 * one_m_r2)
        e01 = -rho / (sb0 * sb1 * one_m_r2)
        quad = e00 * b0r**2 + 2.0 * e01 * b0r * b1r + e11 * b1r**2
        ll_b = -_LOG2PI - 0.5 * np.log(det_g) - 0.5 * quad

        M = plans.log_weights + ll_y + ll_t + ll_b
        mx = M.max(axis=1)
        if not np.all(np.isfinite(mx)):
            raise EvaluationError("likelihood underflow or overflow at all nodes")
        ll_i = mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))
        loglik = float(ll_i.sum())
        if not np.isfinite(loglik):
            raise EvaluationError("non-finite log-likelihood")
        if not want_score:
            return loglik, None

        omega = np.exp(M - ll_i[:, None])
        n, r = omega.shape
        J = np.zeros((n, r, layout.n_params))

        # Measurement block.
        p_l = cache.Xl.shape[1]
        term_y = np.empty((n, r, p_l))
        for p in range(p_l):
            term_y[:, :, p] = np.add.reduceat(
                resid * cache.Xl[:, p][:, None], cache.obs_starts, axis=0
            )
        J[:, :, layout.beta_slice] = term_y / se**2 + alpha * (
            cache.delta[:, None, None] * cache.Xl_T[:, None, :]
            - np.einsum("nur,nup->nrp", wh, cache.Xl_u)
        )
        J[:, :, layout.i_sigma_eps] = (
            -cache.n_obs_per[:, None] / se + rss / se**3
        )

        # Event block.
        J[:, :, layout.gamma_slice] = cache.delta[:, None, None] * cache.Xg_T[
            :, None, :
        ] - np.einsum("nur,nup->nrp", wh, cache.Xg_u)
        m_T = (cache.Xl_T @ beta)[:, None] + m_T_rand
        m_u = m_fix_u[:, :, None] + m_rand_u
        J[:, :, layout.i_alpha] = cache.delta[:, None] * m_T - np.einsum(
            "nur,nur->nr", wh, m_u
        )
        J[:, :, layout.i_lambda0] = (cache.delta[:, None] - H) / lam
        c_k = 1.0 / kap + cache.log_u
        J[:, :, layout.i_kappa] = cache.delta[:, None] * (
            1.0 / kap + cache.log_T[:, None]
        ) - np.einsum("nur,nu->nr", wh, c_k)

        # Random-effects block.
        w0 = e00 * b0r + e01 * b1r
        w1 = e01 * b0r + e11 * b1r
        J[:, :, layout.i_sigma_b0] = (
            -(sb0 * e00 + rho * sb1 * e01) + sb0 * w0**2 + rho * sb1 * w0 * w1
        )
        J[:, :, layout.i_sigma_b1] = (
            -(sb1 * e11 + rho * sb0 * e01) + sb1 * w1**2 + rho * sb0 * w0 * w1
        )
        J[:, :, layout.i_rho] = sb0 * sb1 * (w0 * w1 - e01)

        score = np.einsum("nr,nrp->p", omega, J)
        if not np.all(np.isfinite(score)):
            raise EvaluationError("non-finite score")
        return loglik, score


def observed_loglik(
    data: Sequence[SubjectRecord],
    theta: Theta,
    plans: QuadraturePlans,
    cfg: DesignConfig,
) -> float:
    """Observed-data log-likelihood with random effects integrated out."""
    layout = ParamLayout(cfg)
    cache = JointCache(data, cfg)
    ll, _ = _core(cache, plans, layout.to_natural(theta), layout, want_score=False)
    return ll


def observed_score(
    data: Sequence[SubjectRecord],
    theta: Theta,
    plans: QuadraturePlans,
    cfg: DesignConfig,
) -> np.ndarray:
    """Gradient of the observed log-likelihood on the natural scale."""
    layout = ParamLayout(cfg)
    cache = JointCache(data, cfg)
    _, score = _core(cache, plans, layout.to_natural(theta), layout, want_score=True)
    assert score is not None
    return score


# -- initial values -------------------------------------------------------


@dataclass
class InitialValues:
    theta: Theta
    lmm: LmmFit


def _survival_only_fit(
    cache: JointCache, layout: ParamLayout, maxiter: int = 300
) -> np.ndarray:
    """Relative-risk regression with the biomarker link switched off.

    Returns the stacked [hazard coefficients, log scale, log shape].
    """
    p_g = cache.Xg_T.shape[1]
    n_events = cache.n_events
    if n_events == 0:
        raise InitializationError("no events observed; hazard scale is unidentified")
    lam0 = n_events / float(cache.T.sum())
    w0 = np.concatenate([np.zeros(p_g), [np.log(lam0), 0.0]])

    delta = cache.delta
    sum_delta = float(delta.sum())

    def negll_grad(wv: np.ndarray):
        gamma = wv[:p_g]
        lam = np.exp(wv[p_g])
        kap = np.exp(wv[p_g + 1])
        with np.errstate(over="ignore", invalid="ignore"):
            eta_u = cache.Xg_u @ gamma
            log_h0 = np.log(lam * kap) + (kap - 1.0) * cache.log_u
            wh = cache.w * np.exp(log_h0 + eta_u)
            H = wh.sum(axis=1)
            eta_T = cache.Xg_T @ gamma
            ll = float(
                np.sum(
                    delta * (np.log(lam * kap) + (kap - 1.0) * cache.log_T + eta_T)
                )
                - H.sum()
            )
            if not np.isfinite(ll):
                return 1e12, np.zeros(p_g + 2)
            g_gamma = delta @ cache.Xg_T - np.einsum("nu,nup->p", wh, cache.Xg_u)
            g_loglam = sum_delta - H.sum()
            c_k = 1.0 / kap + cache.log_u
            g_logkap = kap * (
                float(np.sum(delta * (1.0 / kap + cache.log_T)))
                - float(np.sum(wh * c_k))
            )
            grad = np.concatenate([g_gamma, [g_loglam, g_logkap]])
            if not np.all(np.isfinite(grad)):
                return 1e12, np.zeros(p_g + 2)
        return -ll, -grad

    bounds = [(-_BOUND_COEF, _BOUND_COEF)] * p_g + [_BOUND_LOG, _BOUND_LOG]
    res = optimize.minimize(
        negll_grad,
        w0,
        method="L-BFGS-B",
        jac=True,
        bounds=bounds,
        options={"maxiter": maxiter, "maxcor": 10, "ftol": 1e-12},
    )
    return res.x


def _breslow_shape_scale(
    cache: JointCache, gamma: np.ndarray
) -> tuple[float, float] | None:
    """Scale and shape from a log-log regression on a step estimator.

    Cumulative-hazard increments d_k / sum(risk-weighted exposure) are
    accumulated at distinct event times; regressing their log on log
    time identifies the two Weibull parameters.  Returns None when
    fewer than two distinct event times exist.
    """
    event_times = cache.T[cache.delta > 0.0]
    if event_times.size == 0:
        return None
    s, counts = np.unique(event_times, return_counts=True)
    if s.size < 2:
        return None
    tau_s = cache.cfg.tau_scaled
    # The hazard predictor at time s is linear in the pre/post exposure
    # clocks, so three per-subject scalars suffice; the indicator parts
    # are recovered from the cached designs at T by dividing the clocks
    # back out (exact for these piecewise-linear columns).
    nx = cache.cfg.n_baseline_covariates
    const = cache.Xg_T[:, :nx] @ gamma[:nx]
    n1 = len(cache.cfg.survival_stage1_treatments())
    pre_block = cache.Xg_T[:, nx : nx + n1]
    pre_at_T = np.minimum(cache.T, tau_s)[:, None]
    pre_coef = (pre_block / pre_at_T) @ gamma[nx : nx + n1]
    post_block = cache.Xg_T[:, nx + n1 :]
    post_at_T = np.maximum(cache.T - tau_s, 0.0)[:, None]
    post_ind = np.where(post_at_T > 0.0, post_block, 0.0) / np.where(
        post_at_T > 0.0, post_at_T, 1.0
    )
    post_coef = post_ind @ gamma[nx + n1 :]

    pre_k = np.minimum(s, tau_s)
    post_k = np.maximum(s - tau_s, 0.0)
    eta = const[:, None] + pre_coef[:, None] * pre_k[None, :] + post_coef[:, None] * post_k[None, :]
    at_risk = cache.T[:, None] >= s[None, :] - 1e-12
    denom = np.sum(np.exp(eta) * at_risk, axis=0)
    if np.any(denom <= 0.0):
        return None
    h0 = np.cumsum(counts / denom)
    x_ls = np.column_stack([np.ones_like(s), np.log(s)])
    coef, *_ = np.linalg.lstsq(x_ls, np.log(h0), rcond=None)
    log_lam, kap = float(coef[0]), float(coef[1])
    if not (np.isfinite(log_lam) and np.isfinite(kap)) or kap <= 0.0:
        return None
    lo, hi = np.exp(_BOUND_LOG[0]), np.exp(_BOUND_LOG[1])
    return float(np.clip(np.exp(log_lam), lo, hi)), float(np.clip(kap, lo, hi))


def initialize_theta(
    data: Sequence[SubjectRecord], cfg: DesignConfig
) -> InitialValues:
    """Starting values: mixed-model fit, then a biomarker-free hazard fit.

    The hazard shape and scale are refreshed from a step-estimator
    regression, and the association coefficient starts at zero.
    """
    layout = ParamLayout(cfg)
    lmm = fit_lmm(data, cfg)
    cache = JointCache(data, cfg)
    surv = _survival_only_fit(cache, layout)
    p_g = cache.Xg_T.shape[1]
    gamma = surv[:p_g]
    lam, kap = float(np.exp(surv[p_g])), float(np.exp(surv[p_g + 1]))
    refreshed = _breslow_shape_scale(cache, gamma)
    if refreshed is not None:
        lam, kap = refreshed

    nat = np.empty(layout.n_params)
    nat[layout.beta_slice] = lmm.beta
    nat[layout.i_sigma_b0] = max(np.sqrt(lmm.G[0, 0]), 1e-3)
    nat[layout.i_sigma_b1] = max(np.sqrt(lmm.G[1, 1]), 1e-3)
    denom = nat[layout.i_sigma_b0] * nat[layout.i_sigma_b1]
    nat[layout.i_rho] = float(np.clip(lmm.G[0, 1] / denom, -0.99, 0.99))
    nat[layout.i_sigma_eps] = lmm.sigma_eps
    nat[layout.i_lambda0] = lam
    nat[layout.i_kappa] = kap
    nat[layout.gamma_slice] = gamma
    nat[layout.i_alpha] = 0.0
    work = layout.clip_to_bounds(layout.working_from_natural(nat))
    return InitialValues(theta=layout.from_working(work), lmm=lmm)


# -- full fit --------------------------------------------------------------


@dataclass
class FitOptions:
    k_nodes: int = 5
    max_iterations: int = 500
    gradient_tolerance: float = 1e-3
    compute_information: bool = True


@dataclass
class FitResult:
    theta_hat: Theta
    layout: ParamLayout
    theta_working: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    rel_projected_gradient: float
    n_subjects: int
    k_nodes: int
    vcov_working: np.ndarray | None = None
    vcov: np.ndarray | None = None
    se: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def se_for(self, name: str) -> float:
        if self.se is None:
            raise FitError("standard errors were not computed")
        return float(self.se[self.layout.index(name)])


def _projected_gradient(
    grad: np.ndarray, w: np.ndarray, bounds: list[tuple[float, float]]
) -> np.ndarray:
    """Gradient of the objective with bound-blocked components zeroed."""
    pg = grad.copy()
    for j, (lo, hi) in enumerate(bounds):
        if w[j] <= lo + 1e-12 and grad[j] > 0.0:
            pg[j] = 0.0
        if w[j] >= hi - 1e-12 and grad[j] < 0.0:
            pg[j] = 0.0
    return pg


def _information_from_cache(
    cache: JointCache,
    plans: QuadraturePlans,
    work: np.ndarray,
    layout: ParamLayout,
) -> np.ndarray:
    """Observed information on the working scale by differencing the score."""

    def working_score(wv: np.ndarray) -> np.ndarray:
        nat = layout.natural_from_working(wv)
        _, score = _core(cache, plans, nat, layout, want_score=True)
        assert score is not None
        return score * layout.jacobian(wv)

    p = layout.n_params
    info = np.empty((p, p))
    step = np.cbrt(np.finfo(float).eps)
    for j in range(p):
        h = step * max(1.0, abs(work[j]))
        wp = work.copy()
        wp[j] += h
        wm = work.copy()
        wm[j] -= h
        info[:, j] = -(working_score(wp) - working_score(wm)) / (2.0 * h)
    return 0.5 * (info + info.T)


def observed_information(
    data: Sequence[SubjectRecord],
    theta: Theta,
    plans: QuadraturePlans,
    cfg: DesignConfig,
) -> np.ndarray:
    """Observed information for the working parameters at ``theta``."""
    layout = ParamLayout(cfg)
    cache = JointCache(data, cfg)
    return _information_from_cache(cache, plans, layout.to_working(theta), layout)


def fit_joint_model(
    data: Sequence[SubjectRecord],
    cfg: DesignConfig,
    options: FitOptions | None = None,
) -> FitResult:
    """Fit the joint model by maximum likelihood.

    Returns point estimates, convergence diagnostics, and (unless turned
    off) standard errors from the observed information.  A non-invertible
    information matrix is replaced by its pseudo-inverse and flagged in
    ``warnings`` rather than raised.
    """
    opts = options or FitOptions()
    layout = ParamLayout(cfg)
    cache = JointCache(data, cfg)
    init = initialize_theta(data, cfg)
    plans = build_quadrature_plans(
        data, init.lmm.beta, init.lmm.sigma_eps, init.lmm.G, cfg, opts.k_nodes
    )
    w0 = layout.clip_to_bounds(layout.to_working(init.theta))
    bounds = layout.bounds()
    n_params = layout.n_params

    def objective(wv: np.ndarray):
        try:
            nat = layout.natural_from_working(wv)
            ll, score = _core(cache, plans, nat, layout, want_score=True)
        except EvaluationError:
            return 1e12, np.zeros(n_params)
        assert score is not None
        return -ll, -(score * layout.jacobian(wv))

    res = optimize.minimize(
        objective,
        w0,
        method="L-BFGS-B",
        jac=True,
        bounds=bounds,
        options={
            "maxiter": opts.max_iterations,
            "maxcor": 10,
            "ftol": 10.0 * np.finfo(float).eps,
            "gtol": opts.gradient_tolerance,
        },
    )
    w_hat = np.asarray(res.x, dtype=float)
    try:
        nat_hat = layout.natural_from_working(w_hat)
        loglik, score_nat = _core(cache, plans, nat_hat, layout, want_score=True)
    except EvaluationError as exc:
        raise FitError(f"likelihood not evaluable at the solution: {exc}") from exc
    assert score_nat is not None
    grad_obj = -(score_nat * layout.jacobian(w_hat))
    pg = _projected_gradient(grad_obj, w_hat, bounds)
    rel_pg = float(np.max(np.abs(pg)) / max(1.0, abs(loglik)))
    converged = rel_pg <= opts.gradient_tolerance

    warnings: list[str] = []
    if not converged:
        warnings.append(
            f"relative projected gradient {rel_pg:.3e} above "
            f"{opts.gradient_tolerance:.0e} after {res.nit} iterations"
        )

    vcov_w = vcov_nat = se_nat = None
    if opts.compute_information:
        info = _information_from_cache(cache, plans, w_hat, layout)
        try:
            chol = np.linalg.cholesky(info)
            ident = np.eye(n_params)
            half = np.linalg.solve(chol, ident)
            vcov_w = half.T @ half
        except np.linalg.LinAlgError:
            warnings.append(
                "observed information is not positive definite; "
                "pseudo-inverse used for the covariance"
            )
            vcov_w = np.linalg.pinv(info)
        jac = layout.jacobian(w_hat)
        vcov_nat = vcov_w * np.outer(jac, jac)
        diag = np.diag(vcov_nat).copy()
        bad = diag < 0.0
        if np.any(bad):
            warnings.append("negative variance estimates clipped to zero")
            diag[bad] = 0.0
        se_nat = np.sqrt(diag)

    return FitResult(
        theta_hat=layout.from_working(w_hat),
        layout=layout,
        theta_working=w_hat,
        loglik=loglik,
        converged=converged,
        n_iter=int(res.nit),
        rel_projected_gradient=rel_pg,
        n_subjects=cache.n_subjects,
        k_nodes=opts.k_nodes,
        vcov_working=vcov_w,
        vcov=vcov_nat,
        se=se_nat,
        warnings=warnings,
    )
