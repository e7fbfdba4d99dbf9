"""Core data model for two-stage adaptive treatment trials.

A trial randomizes subjects at baseline to one of two initial treatments.
At a fixed decision time ``tau`` the biomarker response is assessed;
responders continue their initial treatment while non-responders are
re-randomized to one of two switch treatments.  A regimen (``Dtr``) is a
rule "start with v1; continue v1 on response, else switch to v2".

Time convention
---------------
All times held in records, configs, and public signatures are on the
trial's natural axis (e.g. weeks).  Model coefficients in ``Theta`` are
expressed per *scaled* time unit: every formula multiplies time by
``cfg.time_scale`` before applying coefficients.  With the default scale
of 0.1 a slope of -0.5 means -0.05 per week.  This keeps hazard and
slope parameters well conditioned during optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, EvaluationError

__all__ = [
    "DesignConfig",
    "Dtr",
    "SubjectRecord",
    "Theta",
    "latent_trajectory",
    "linear_predictor",
    "response_indicator",
]

_SCHEDULE_ATOL = 1e-9


def _dense_schedule() -> tuple[float, ...]:
    return tuple(float(w) for w in range(25))


SPARSE_SCHEDULE: tuple[float, ...] = (0.0, 8.0, 16.0, 24.0)


@dataclass(frozen=True)
class DesignConfig:
    """Trial design constants and model coding choices.

    ``stage1`` and ``stage2`` list the initial and switch treatment
    labels.  ``stage1_survival_ref`` is the initial treatment absorbed
    into the baseline hazard; ``stage2_ref`` is the reference for both
    the longitudinal slopes and the sequence-nested hazard effects.
    """

    tau: float = 8.0
    response_threshold: float = 1.3
    t_max: float = 24.0
    p1: float = 0.5
    p2: float = 0.5
    time_scale: float = 0.1
    measurement_schedule: tuple[float, ...] = field(default_factory=_dense_schedule)
    stage1: tuple[str, str] = ("A", "B")
    stage2: tuple[str, str] = ("C", "D")
    stage1_survival_ref: str = "B"
    stage2_ref: str = "D"
    n_baseline_covariates: int = 2
    gk_panels_post_tau: int = 1
    eta_bound: float = 50.0

    def __post_init__(self) -> None:
        if not (0.0 < self.tau < self.t_max):
            raise ConfigError(f"tau must lie in (0, t_max); got tau={self.tau}, t_max={self.t_max}")
        if not (0.0 < self.p1 < 1.0 and 0.0 < self.p2 < 1.0):
            raise ConfigError("randomization probabilities must lie in (0, 1)")
        if self.time_scale <= 0.0:
            raise ConfigError("time_scale must be positive")
        if self.n_baseline_covariates < 0:
            raise ConfigError("n_baseline_covariates must be nonnegative")
        if self.gk_panels_post_tau < 1:
            raise ConfigError("gk_panels_post_tau must be at least 1")
        sched = self.measurement_schedule
        if len(sched) == 0 or abs(sched[0]) > _SCHEDULE_ATOL:
            raise ConfigError("measurement schedule must start at time 0")
        if any(b < a for a, b in zip(sched, sched[1:])):
            raise ConfigError("measurement schedule must be nondecreasing")
        if sched[-1] > self.t_max + _SCHEDULE_ATOL:
            raise ConfigError("measurement schedule extends past t_max")
        if not any(abs(t - self.tau) <= _SCHEDULE_ATOL for t in sched):
            raise ConfigError("measurement schedule must include the decision time tau")
        if len(set(self.stage1)) != len(self.stage1) or len(set(self.stage2)) != len(self.stage2):
            raise ConfigError("treatment labels must be distinct within a stage")
        if set(self.stage1) & set(self.stage2):
            raise ConfigError("stage-1 and stage-2 treatment labels must not overlap")
        if self.stage1_survival_ref not in self.stage1:
            raise ConfigError("stage1_survival_ref must be a stage-1 label")
        if self.stage2_ref not in self.stage2:
            raise ConfigError("stage2_ref must be a stage-2 label")

    # -- derived coding ------------------------------------------------

    @property
    def tau_scaled(self) -> float:
        return self.tau * self.time_scale

    @property
    def t_max_scaled(self) -> float:
        return self.t_max * self.time_scale

    def longitudinal_treatments(self) -> tuple[str, ...]:
        """Labels carrying a free longitudinal slope (stage2_ref absorbed)."""
        return tuple(lab for lab in self.stage1 + self.stage2 if lab != self.stage2_ref)

    def survival_stage1_treatments(self) -> tuple[str, ...]:
        return tuple(lab for lab in self.stage1 if lab != self.stage1_survival_ref)

    def survival_sequences(self) -> tuple[str, ...]:
        """Sequence labels with a free post-decision hazard effect.

        Continuation sequences come first, then switches, each in stage
        order; sequences ending in ``stage2_ref`` are the reference.
        """
        cont = tuple(v1 + v1 for v1 in self.stage1)
        switch = tuple(
            v1 + v2 for v2 in self.stage2 if v2 != self.stage2_ref for v1 in self.stage1
        )
        return cont + switch

    def sequence_label(self, v1: str, v2: str) -> str:
        return v1 + v2

    def embedded_dtrs(self) -> tuple["Dtr", ...]:
        return tuple(
            Dtr(v1=v1, v2_responder=v1, v2_nonresponder=v2)
            for v1 in self.stage1
            for v2 in self.stage2
        )

    def validate_treatments(self, v1: str, v2: str | None) -> None:
        if v1 not in self.stage1:
            raise DataError(f"unknown stage-1 treatment {v1!r}")
        if v2 is not None and v2 not in self.stage1 + self.stage2:
            raise DataError(f"unknown stage-2 treatment {v2!r}")

    def with_schedule(self, schedule: Sequence[float]) -> "DesignConfig":
        return replace(self, measurement_schedule=tuple(float(t) for t in schedule))


@dataclass(frozen=True)
class Dtr:
    """A two-stage regimen: start v1, keep v1 on response, else switch."""

    v1: str
    v2_responder: str
    v2_nonresponder: str

    def __post_init__(self) -> None:
        if self.v2_responder != self.v1:
            raise ConfigError("responders continue the initial treatment")

    @property
    def label(self) -> str:
        return f"{self.v1}{self.v2_responder}{self.v2_nonresponder}"

    def stage2_for(self, responder: bool) -> str:
        return self.v2_responder if responder else self.v2_nonresponder


@dataclass
class SubjectRecord:
    """One subject's observed data on the natural time axis."""

    subject_id: int
    x0: tuple[float, ...]
    times: tuple[float, ...]
    values: tuple[float, ...]
    v1: str
    responder: bool | None
    v2: str | None
    obs_time: float
    event: bool

    def validate(self, cfg: DesignConfig) -> None:
        if len(self.x0) != cfg.n_baseline_covariates:
            raise DataError(
                f"subject {self.subject_id}: expected {cfg.n_baseline_covariates} "
                f"baseline covariates, got {len(self.x0)}"
            )
        cfg.validate_treatments(self.v1, self.v2)
        if len(self.times) != len(self.values):
            raise DataError(f"subject {self.subject_id}: times/values length mismatch")
        if len(self.times) == 0:
            raise DataError(f"subject {self.subject_id}: needs at least one measurement")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise DataError(f"subject {self.subject_id}: measurement times must be nondecreasing")
        if not (self.obs_time > 0.0):
            raise DataError(f"subject {self.subject_id}: obs_time must be positive")
        if self.times[-1] > self.obs_time + _SCHEDULE_ATOL:
            raise DataError(f"subject {self.subject_id}: measurement past follow-up time")
        reached = self.obs_time >= cfg.tau - _SCHEDULE_ATOL
        if self.responder is None:
            if self.v2 is not None:
                raise DataError(f"subject {self.subject_id}: stage-2 treatment without response status")
            if self.obs_time > cfg.tau + _SCHEDULE_ATOL:
                raise DataError(
                    f"subject {self.subject_id}: followed past the decision time "
                    "without a response status"
                )
        else:
            if not reached:
                raise DataError(
                    f"subject {self.subject_id}: response recorded before the decision time"
                )
            if self.v2 is None:
                raise DataError(f"subject {self.subject_id}: response status without stage-2 treatment")
            if self.responder and self.v2 != self.v1:
                raise DataError(
                    f"subject {self.subject_id}: responders must continue the initial treatment"
                )
            if not self.responder and self.v2 not in cfg.stage2:
                raise DataError(
                    f"subject {self.subject_id}: non-responders must switch to a stage-2 label"
                )
        if not all(math.isfinite(v) for v in self.values):
            raise DataError(f"subject {self.subject_id}: non-finite measurement value")
        if not all(math.isfinite(v) for v in self.x0):
            raise DataError(f"subject {self.subject_id}: non-finite baseline covariate")


@dataclass
class Theta:
    """Joint model parameters (coefficients per scaled time unit).

    ``beta_trt`` maps longitudinal treatment labels to slopes applied to
    cumulative exposure time; the reference label is absent (slope 0).
    ``gamma_stage1`` maps initial treatments to hazard effects on
    min(t, tau); ``gamma_stage2`` maps sequence labels (e.g. "AC") to
    hazard effects on (t - tau)+.  Reference labels are absent.
    """

    beta0: float
    beta_x: tuple[float, ...]
    beta_t: float
    beta_trt: Mapping[str, float]
    sigma_eps: float
    sigma_b0: float
    sigma_b1: float
    rho: float
    lambda0: float
    kappa: float
    gamma_x: tuple[float, ...]
    gamma_stage1: Mapping[str, float]
    gamma_stage2: Mapping[str, float]
    alpha: float

    def validate(self) -> None:
        for name in ("sigma_eps", "sigma_b0", "sigma_b1", "lambda0", "kappa"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive")
        if not (-1.0 < self.rho < 1.0):
            raise ConfigError("rho must lie in (-1, 1)")

    @property
    def G(self) -> np.ndarray:
        """Random-effects covariance built from (sigma_b0, sigma_b1, rho)."""
        cov = self.rho * self.sigma_b0 * self.sigma_b1
        return np.array(
            [[self.sigma_b0**2, cov], [cov, self.sigma_b1**2]], dtype=float
        )

    def beta_for(self, label: str | None) -> float:
        if label is None:
            return 0.0
        return float(self.beta_trt.get(label, 0.0))

    def gamma1_for(self, v1: str) -> float:
        return float(self.gamma_stage1.get(v1, 0.0))

    def gamma2_for(self, v1: str, v2: str | None) -> float:
        if v2 is None:
            return 0.0
        return float(self.gamma_stage2.get(v1 + v2, 0.0))


# -- formula internals (scaled-time inputs) ----------------------------


def _exposures_scaled(
    ts: np.ndarray, tau_s: float, v1: str, v2: str | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre- and post-decision exposure times at scaled times ``ts``.

    Returns (pre, post, post-indicator); ``post`` is zero when ``v2`` is
    absent, which is only valid while ``ts <= tau_s``.
    """
    pre = np.minimum(ts, tau_s)
    post = np.maximum(ts - tau_s, 0.0)
    if v2 is None:
        post = np.zeros_like(post)
    return pre, post, (ts > tau_s)


def _latent_mean_scaled(
    ts: np.ndarray,
    tau_s: float,
    x0: np.ndarray,
    b: tuple[float, float],
    v1: str,
    v2: str | None,
    theta: Theta,
) -> np.ndarray:
    pre, post, _ = _exposures_scaled(ts, tau_s, v1, v2)
    m = (
        theta.beta0
        + float(np.dot(theta.beta_x, x0))
        + theta.beta_t * ts
        + theta.beta_for(v1) * pre
        + theta.beta_for(v2) * post
        + b[0]
        + b[1] * ts
    )
    return m


def _gamma_predictor_scaled(
    ts: np.ndarray,
    tau_s: float,
    x0: np.ndarray,
    v1: str,
    v2: str | None,
    theta: Theta,
) -> np.ndarray:
    pre, post, _ = _exposures_scaled(ts, tau_s, v1, v2)
    return (
        float(np.dot(theta.gamma_x, x0))
        + theta.gamma1_for(v1) * pre
        + theta.gamma2_for(v1, v2) * post
    )


def _check_post_tau(ts: np.ndarray, tau_s: float, v2: str | None) -> None:
    if v2 is None and np.any(ts > tau_s + _SCHEDULE_ATOL):
        raise EvaluationError("stage-2 treatment required to evaluate past the decision time")


# -- public evaluators (natural-time inputs) ---------------------------


def latent_trajectory(
    t,
    x0: Sequence[float],
    b: tuple[float, float],
    v1: str,
    v2: str | None,
    theta: Theta,
    cfg: DesignConfig,
):
    """Mean biomarker level m(t) for one subject.

    ``t`` may be a scalar or an array of natural-axis times.  ``v2`` may
    be omitted only when no time exceeds ``cfg.tau``.
    """
    t_arr = np.asarray(t, dtype=float)
    ts = t_arr * cfg.time_scale
    tau_s = cfg.tau_scaled
    _check_post_tau(ts, tau_s, v2)
    x0v = np.asarray(x0, dtype=float)
    m = _latent_mean_scaled(ts, tau_s, x0v, b, v1, v2, theta)
    return float(m) if np.isscalar(t) or t_arr.ndim == 0 else m


def linear_predictor(
    t,
    x0: Sequence[float],
    b: tuple[float, float],
    v1: str,
    v2: str | None,
    theta: Theta,
    cfg: DesignConfig,
):
    """Hazard linear predictor eta(t), including the biomarker link term."""
    t_arr = np.asarray(t, dtype=float)
    ts = t_arr * cfg.time_scale
    tau_s = cfg.tau_scaled
    _check_post_tau(ts, tau_s, v2)
    x0v = np.asarray(x0, dtype=float)
    eta = _gamma_predictor_scaled(ts, tau_s, x0v, v1, v2, theta) + theta.alpha * (
        _latent_mean_scaled(ts, tau_s, x0v, b, v1, v2, theta)
    )
    return float(eta) if np.isscalar(t) or t_arr.ndim == 0 else eta


def response_indicator(y_baseline: float, y_decision: float, threshold: float) -> bool:
    """True when the biomarker dropped by at least ``threshold``."""
    return bool(y_baseline - y_decision >= threshold)
