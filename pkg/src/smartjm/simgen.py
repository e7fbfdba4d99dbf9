"""Trial data generator for the simulation study.

Subjects are generated one at a time from independent random streams:
baseline covariates, random effects, the initial randomization, a unit
exponential deviate for the event time, a censoring time, measurement
errors for the full schedule, and the switch randomization draw.  Event
times come from inverting the cumulative hazard, which is evaluated by
composite Simpson integration and solved by bisection.  The response at
the decision time uses the noisy measurements, exactly as a trial would
assess it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvaluationError
from .model import DesignConfig, SubjectRecord, Theta, response_indicator

__all__ = [
    "DgmTruth",
    "reference_truth",
    "invert_cumulative_hazard",
    "simulate_subject",
    "simulate_trial",
    "summarize_rates",
]

_BISECT_TOL = 1e-10
_SIMPSON_SUBINTERVALS = 24


@dataclass(frozen=True)
class DgmTruth:
    """Generative parameter set: model truth plus nuisance mechanisms.

    ``censor_rate`` is the exponential dropout rate per scaled time
    unit; ``p_x01`` the success probability of the binary baseline
    covariate (the second covariate is standard normal).
    """

    theta: Theta
    censor_rate: float = 0.15
    p_x01: float = 0.6

    def __post_init__(self) -> None:
        if self.censor_rate <= 0.0:
            raise ConfigError("censor_rate must be positive")
        if not (0.0 < self.p_x01 < 1.0):
            raise ConfigError("p_x01 must lie in (0, 1)")
        if self.theta.kappa < 1.0:
            raise ConfigError("the generator requires a nondecreasing baseline hazard (kappa >= 1)")


def reference_truth() -> DgmTruth:
    """The reference parameter set used throughout the simulation study."""
    theta = Theta(
        beta0=3.5,
        beta_x=(0.5, 0.7),
        beta_t=-0.5,
        beta_trt={"A": -0.8, "B": -0.6, "C": -0.7},
        sigma_eps=0.5,
        sigma_b0=0.5,
        sigma_b1=0.2,
        rho=-0.3,
        lambda0=0.15,
        kappa=2.6,
        gamma_x=(0.4, 0.2),
        gamma_stage1={"A": -0.5},
        gamma_stage2={"AA": -1.5, "BB": -1.4, "AC": -1.0, "BC": -0.9},
        alpha=0.2,
    )
    return DgmTruth(theta=theta)


@dataclass
class _HazardPath:
    """Scalar hazard evaluator for one subject draw on the scaled axis.

    The predictor is affine on each side of the decision time, so the
    hazard reduces to lambda0*kappa*u^(kappa-1)*exp(c + s*u) per piece.
    """

    lambda0: float
    kappa: float
    tau_s: float
    pre_const: float
    pre_slope: float
    post_const: float
    post_slope: float

    def value(self, u: float) -> float:
        if u == 0.0:
            if self.kappa > 1.0:
                return 0.0
            if self.kappa == 1.0:
                return self.lambda0 * math.exp(self.pre_const)
            raise EvaluationError("hazard diverges at time zero for kappa < 1")
        if u <= self.tau_s:
            lin = self.pre_const + self.pre_slope * u
        else:
            lin = self.post_const + self.post_slope * u
        return self.lambda0 * self.kappa * u ** (self.kappa - 1.0) * math.exp(lin)


def _build_path(
    x0: tuple[float, float],
    b: tuple[float, float],
    v1: str,
    v2: str | None,
    theta: Theta,
    cfg: DesignConfig,
) -> _HazardPath:
    tau_s = cfg.tau_scaled
    gx = float(np.dot(theta.gamma_x, x0))
    base = gx + theta.alpha * (
        theta.beta0 + float(np.dot(theta.beta_x, x0)) + b[0]
    )
    pre_slope = theta.gamma1_for(v1) + theta.alpha * (
        theta.beta_t + theta.beta_for(v1) + b[1]
    )
    if v2 is None:
        post_const = math.nan
        post_slope = math.nan
    else:
        gamma2 = theta.gamma2_for(v1, v2)
        post_slope = gamma2 + theta.alpha * (
            theta.beta_t + theta.beta_for(v2) + b[1]
        )
        # eta is continuous at tau: match the pre-piece value there.
        post_const = base + (pre_slope - post_slope) * tau_s
    return _HazardPath(
        lambda0=theta.lambda0,
        kappa=theta.kappa,
        tau_s=tau_s,
        pre_const=base,
        pre_slope=pre_slope,
        post_const=post_const,
        post_slope=post_slope,
    )


def _simpson(path: _HazardPath, a: float, b: float) -> float:
    """Composite Simpson integral of the hazard over [a, b] (scaled axis)."""
    if b <= a:
        return 0.0
    n = _SIMPSON_SUBINTERVALS
    h = (b - a) / n
    total = path.value(a) + path.value(b)
    for j in range(1, n):
        total += (4.0 if j % 2 else 2.0) * path.value(a + j * h)
    return total * h / 3.0


def invert_cumulative_hazard(
    target: float, path: _HazardPath, lo: float, hi: float
) -> float | None:
    """Solve H(t) - H(lo) = target for t in (lo, hi] by bisection.

    Returns None when the interval does not accumulate enough hazard.
    The returned time is on the scaled axis, accurate to 1e-10.
    """
    if target <= 0.0:
        raise EvaluationError("hazard target must be positive")
    total = _simpson(path, lo, hi)
    if total < target:
        return None
    left, right = lo, hi
    while right - left > _BISECT_TOL:
        mid = 0.5 * (left + right)
        if _simpson(path, lo, mid) >= target:
            right = mid
        else:
            left = mid
    return 0.5 * (left + right)


def simulate_subject(
    rng: np.random.Generator, subject_id: int, truth: DgmTruth, cfg: DesignConfig
) -> SubjectRecord:
    """Draw one subject's complete trajectory and observed record."""
    theta = truth.theta
    s = cfg.time_scale
    tau_s = cfg.tau_scaled
    t_max_s = cfg.t_max_scaled

    x01 = 1.0 if rng.random() < truth.p_x01 else 0.0
    x02 = float(rng.standard_normal())
    x0 = (x01, x02)
    v1 = cfg.stage1[0] if rng.random() < cfg.p1 else cfg.stage1[1]
    z = rng.standard_normal(2)
    chol = np.linalg.cholesky(theta.G)
    b = tuple(float(v) for v in chol @ z)
    energy = float(rng.standard_exponential())
    censor_s = float(rng.standard_exponential()) / truth.censor_rate
    eps = rng.standard_normal(len(cfg.measurement_schedule)) * theta.sigma_eps
    switch_u = float(rng.random())

    sched = np.asarray(cfg.measurement_schedule, dtype=float)
    sched_s = sched * s

    pre_path = _build_path(x0, b, v1, None, theta, cfg)
    pre_hazard = _simpson(pre_path, 0.0, tau_s)

    # Biomarker series over the full schedule; truncation comes last.
    def measured(v2_lab: str | None) -> np.ndarray:
        pre = np.minimum(sched_s, tau_s)
        post = np.maximum(sched_s - tau_s, 0.0)
        beta2 = theta.beta_for(v2_lab)
        m = (
            theta.beta0
            + float(np.dot(theta.beta_x, x0))
            + theta.beta_t * sched_s
            + theta.beta_for(v1) * pre
            + beta2 * post
            + b[0]
            + b[1] * sched_s
        )
        return m + eps

    if pre_hazard >= energy:
        event_s = invert_cumulative_hazard(energy, pre_path, 0.0, tau_s)
        assert event_s is not None
        responder: bool | None = None
        v2: str | None = None
        y = measured(None)
    else:
        idx0 = int(np.argmin(np.abs(sched - 0.0)))
        idx_tau = int(np.argmin(np.abs(sched - cfg.tau)))
        y_probe = measured(None)
        resp = response_indicator(
            float(y_probe[idx0]), float(y_probe[idx_tau]), cfg.response_threshold
        )
        if resp:
            v2 = v1
        else:
            v2 = cfg.stage2[0] if switch_u < cfg.p2 else cfg.stage2[1]
        responder = resp
        full_path = _build_path(x0, b, v1, v2, theta, cfg)
        remaining = energy - pre_hazard
        event_s = invert_cumulative_hazard(remaining, full_path, tau_s, t_max_s)
        if event_s is None:
            event_s = math.inf
        y = measured(v2)

    obs_s = min(event_s, censor_s, t_max_s)
    event = event_s <= min(censor_s, t_max_s)
    if responder is not None and (censor_s < tau_s or obs_s < tau_s):
        # Lost to follow-up before the decision: response never recorded.
        responder = None
        v2 = None

    keep = sched_s <= obs_s + 1e-12
    if not keep[0]:
        raise EvaluationError("observation window excludes the baseline measurement")
    times = tuple(float(t) for t in sched[keep])
    values = tuple(float(v) for v in y[keep])

    # Undo scaled-axis rounding so the follow-up cap is hit exactly.
    obs_nat = min(float(obs_s / s), cfg.t_max)

    record = SubjectRecord(
        subject_id=subject_id,
        x0=x0,
        times=times,
        values=values,
        v1=v1,
        responder=responder,
        v2=v2,
        obs_time=obs_nat,
        event=bool(event),
    )
    record.validate(cfg)
    return record


def _subject_streams(seed, n: int) -> list[np.random.Generator]:
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def simulate_trial(seed, n: int, truth: DgmTruth, cfg: DesignConfig) -> list[SubjectRecord]:
    """Generate ``n`` subjects from independent derived streams.

    ``seed`` may be an integer, a SeedSequence, or a Generator; subject
    streams are spawned from it, so the dataset does not depend on
    generation order or any parallel execution plan.
    """
    if n <= 0:
        raise ConfigError("n must be positive")
    streams = _subject_streams(seed, n)
    return [
        simulate_subject(stream, i, truth, cfg) for i, stream in enumerate(streams)
    ]


def summarize_rates(data: list[SubjectRecord], cfg: DesignConfig) -> dict[str, float]:
    """Aggregate event/censoring/response rates used to sanity-check the generator."""
    n = len(data)
    pre_event = sum(1 for r in data if r.event and r.obs_time < cfg.tau) / n
    pre_censor = sum(1 for r in data if not r.event and r.obs_time < cfg.tau) / n
    event = sum(1 for r in data if r.event) / n
    censor = sum(
        1 for r in data if not r.event and r.obs_time < cfg.t_max - 1e-9
    ) / n
    assessed = [r for r in data if r.responder is not None]
    response = (
        sum(1 for r in assessed if r.responder) / len(assessed) if assessed else math.nan
    )
    return {
        "pre_tau_event": pre_event,
        "pre_tau_censor": pre_censor,
        "event": event,
        "censor": censor,
        "response": response,
    }
