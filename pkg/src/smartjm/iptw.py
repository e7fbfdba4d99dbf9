"""Weighted Kaplan-Meier comparator for the embedded regimens.

Each subject receives an inverse-randomization weight per regimen: zero
when their treatment path is inconsistent with it, otherwise one over
the probability of the consistent path segments actually randomized.
Subjects who never reach the second randomization (death or censoring
before the decision time) are consistent with every regimen sharing
their initial treatment.

Points come from a weighted product-limit curve; uncertainty comes from
resampling subjects.  Regimens starting on different initial treatments
share no subjects, so their cross-covariances are structural zeros and
are reported as such.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .gformula import EstimandSpec, RegimenValueTable, _check_estimands
from .model import DesignConfig, Dtr, SubjectRecord

__all__ = [
    "dtr_weight",
    "weight_matrix",
    "KmCurve",
    "weighted_km",
    "km_rmst",
    "iptw_values",
    "bootstrap_covariance",
    "iptw_with_bootstrap",
]


def dtr_weight(subject: SubjectRecord, dtr: Dtr, cfg: DesignConfig) -> float:
    """Inverse-randomization weight of one subject under one regimen."""
    if subject.v1 != dtr.v1:
        return 0.0
    p1 = cfg.p1 if subject.v1 == cfg.stage1[0] else 1.0 - cfg.p1
    if p1 <= 0.0:
        raise DataError(f"stage-1 treatment {subject.v1!r} has zero probability")
    if subject.responder is None or subject.responder:
        # Followed only under the shared segment, or a responder who
        # continues: consistent with both second-stage continuations.
        return 1.0 / p1
    if subject.v2 != dtr.v2_nonresponder:
        return 0.0
    p2 = cfg.p2 if subject.v2 == cfg.stage2[0] else 1.0 - cfg.p2
    if p2 <= 0.0:
        raise DataError(f"stage-2 treatment {subject.v2!r} has zero probability")
    return 1.0 / (p1 * p2)


def weight_matrix(data: Sequence[SubjectRecord], cfg: DesignConfig) -> np.ndarray:
    """Weights of every subject (rows) under every regimen (columns)."""
    dtrs = cfg.embedded_dtrs()
    out = np.zeros((len(data), len(dtrs)))
    for i, subject in enumerate(data):
        for j, dtr in enumerate(dtrs):
            out[i, j] = dtr_weight(subject, dtr, cfg)
    return out


@dataclass
class KmCurve:
    """Right-continuous survival step function from a weighted fit."""

    times: np.ndarray   # distinct event times, increasing
    surv: np.ndarray    # value just after each event time

    def evaluate(self, t) -> np.ndarray | float:
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t_arr, side="right")
        padded = np.concatenate([[1.0], self.surv])
        out = padded[idx]
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def weighted_km(
    times: np.ndarray, events: np.ndarray, weights: np.ndarray
) -> KmCurve:
    """Weighted product-limit estimate.

    Subjects censored at an event time are kept in that time's risk set;
    the curve drops only at event times with positive weighted deaths.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0.0):
        raise DataError("negative weight")
    total = float(weights.sum())
    if total <= 0.0:
        raise DataError("no subject carries positive weight")
    event_times = np.unique(times[events & (weights > 0.0)])
    surv = np.empty(event_times.shape[0])
    s = 1.0
    for k, t in enumerate(event_times):
        at_risk = float(weights[times >= t].sum())
        died = float(weights[events & (times == t)].sum())
        s *= 1.0 - died / at_risk
        surv[k] = s
    return KmCurve(times=event_times, surv=surv)


def km_rmst(curve: KmCurve, t_star: float) -> float:
    """Area under the step curve from zero to ``t_star``."""
    if t_star <= 0.0:
        raise DataError("horizon must be positive")
    steps = np.concatenate([[0.0], curve.times])
    values = np.concatenate([[1.0], curve.surv])
    uppers = np.concatenate([curve.times, [t_star]])
    widths = np.clip(np.minimum(uppers, t_star) - np.minimum(steps, t_star), 0.0, None)
    return float(np.sum(values * widths))


def _value_rows(
    data: Sequence[SubjectRecord],
    wmat: np.ndarray,
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
) -> dict[EstimandSpec, np.ndarray]:
    times = np.array([s.obs_time for s in data])
    events = np.array([s.event for s in data], dtype=bool)
    n_dtrs = wmat.shape[1]
    out = {spec: np.empty(n_dtrs) for spec in estimands}
    for j in range(n_dtrs):
        curve = weighted_km(times, events, wmat[:, j])
        for kind, horizon in estimands:
            if kind == "survival":
                out[(kind, horizon)][j] = curve.evaluate(horizon)
            else:
                out[(kind, horizon)][j] = km_rmst(curve, horizon)
    return out


def iptw_values(
    data: Sequence[SubjectRecord],
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
) -> RegimenValueTable:
    """Weighted Kaplan-Meier regimen values for every embedded regimen."""
    _check_estimands(estimands, cfg)
    dtrs = cfg.embedded_dtrs()
    wmat = weight_matrix(data, cfg)
    values = _value_rows(data, wmat, estimands, cfg)
    return RegimenValueTable(
        dtr_labels=tuple(d.label for d in dtrs),
        estimands=tuple(estimands),
        values=values,
    )


def _first_stage_groups(dtrs: Sequence[Dtr]) -> list[np.ndarray]:
    by_v1: dict[str, list[int]] = {}
    for j, d in enumerate(dtrs):
        by_v1.setdefault(d.v1, []).append(j)
    return [np.asarray(ix, dtype=int) for ix in by_v1.values()]


def bootstrap_covariance(
    data: Sequence[SubjectRecord],
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
    rng: np.random.Generator,
    n_boot: int = 1000,
) -> tuple[dict[EstimandSpec, np.ndarray], int]:
    """Subject-resampling covariance of the weighted regimen values.

    A resample in which some regimen has no positive weight is redrawn
    (up to ten times the requested count in total); the number of such
    redraws is returned alongside the covariances.  Blocks that pair
    regimens with different initial treatments are structural zeros.
    """
    _check_estimands(estimands, cfg)
    if n_boot < 2:
        raise DataError("need at least two bootstrap replicates")
    dtrs = cfg.embedded_dtrs()
    n = len(data)
    times = np.array([s.obs_time for s in data])
    events = np.array([s.event for s in data], dtype=bool)
    wmat = weight_matrix(data, cfg)

    reps = {spec: np.empty((n_boot, len(dtrs))) for spec in estimands}
    kept = 0
    redrawn = 0
    budget = 10 * n_boot
    draws = 0
    while kept < n_boot:
        if draws >= budget:
            raise DataError(
                "bootstrap redraw budget exhausted; too many resamples "
                "left a regimen without weight"
            )
        draws += 1
        idx = rng.integers(0, n, size=n)
        wsub = wmat[idx]
        if np.any(wsub.sum(axis=0) <= 0.0):
            redrawn += 1
            continue
        tsub, esub = times[idx], events[idx]
        for j in range(len(dtrs)):
            curve = weighted_km(tsub, esub, wsub[:, j])
            for kind, horizon in estimands:
                if kind == "survival":
                    reps[(kind, horizon)][kept, j] = curve.evaluate(horizon)
                else:
                    reps[(kind, horizon)][kept, j] = km_rmst(curve, horizon)
        kept += 1

    groups = _first_stage_groups(dtrs)
    cov = {}
    for spec in estimands:
        full = np.cov(reps[spec], rowvar=False, ddof=1)
        masked = np.zeros_like(full)
        for ix in groups:
            masked[np.ix_(ix, ix)] = full[np.ix_(ix, ix)]
        cov[spec] = masked
    return cov, redrawn


def iptw_with_bootstrap(
    data: Sequence[SubjectRecord],
    estimands: Sequence[EstimandSpec],
    cfg: DesignConfig,
    rng: np.random.Generator,
    n_boot: int = 1000,
) -> RegimenValueTable:
    """Point values plus bootstrap covariances in one table."""
    table = iptw_values(data, estimands, cfg)
    cov, redrawn = bootstrap_covariance(data, estimands, cfg, rng, n_boot)
    return RegimenValueTable(
        dtr_labels=table.dtr_labels,
        estimands=table.estimands,
        values=table.values,
        cov=cov,
        n_draws=n_boot,
        n_redrawn=redrawn,
    )
