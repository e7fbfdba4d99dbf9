"""Confidence set for the best regimen by comparison with the rest.

Treating larger values as better, a regimen stays in the set when its
observed shortfall against every rival, scaled by the contrast standard
error, does not exceed a simulated critical value.  Critical values are
the (1 - zeta) quantiles of the corresponding maximal contrast under a
joint normal with the estimated covariance, using one shared set of
draws for all regimens so the set is internally consistent.

Pairs whose contrast variance vanishes (regimens sharing all their
subjects and estimates) are treated as exact ties and contribute no
contrast, rather than dividing by a zero standard error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateContrastError

__all__ = ["pairwise_se", "mcb_cutoff", "McbResult", "mcb_best_set"]

_DEGENERATE_VAR = 1e-12


def pairwise_se(cov: np.ndarray, g: int, gp: int) -> float:
    """Standard error of the difference value[gp] - value[g]."""
    cov = np.asarray(cov, dtype=float)
    var = cov[g, g] + cov[gp, gp] - 2.0 * cov[g, gp]
    if var <= _DEGENERATE_VAR:
        raise DegenerateContrastError(
            f"contrast between regimens {g} and {gp} has no variance"
        )
    return float(np.sqrt(var))


def mcb_cutoff(stats: np.ndarray, zeta: float) -> float:
    """Nearest-rank upper quantile of the simulated maximal contrasts."""
    stats = np.sort(np.asarray(stats, dtype=float))
    n = stats.shape[0]
    if n == 0:
        return 0.0
    k = int(np.ceil((1.0 - zeta) * n))
    k = min(max(k, 1), n)
    return float(stats[k - 1])


@dataclass
class McbResult:
    dtr_labels: tuple[str, ...]
    values: np.ndarray
    cutoffs: np.ndarray
    gaps: np.ndarray
    margins: np.ndarray
    in_set: np.ndarray
    best_index: int
    zeta: float
    n_mc: int

    @property
    def set_labels(self) -> tuple[str, ...]:
        return tuple(
            lab for lab, keep in zip(self.dtr_labels, self.in_set) if keep
        )

    @property
    def set_size(self) -> int:
        return int(self.in_set.sum())


def mcb_best_set(
    dtr_labels: tuple[str, ...],
    values: np.ndarray,
    cov: np.ndarray,
    zeta: float = 0.05,
    rng: np.random.Generator | None = None,
    n_mc: int = 20000,
) -> McbResult:
    """Confidence set of regimens not shown worse than the best.

    ``values`` and ``cov`` are the estimates and their joint covariance
    for all regimens, larger values preferred.  ``n_mc`` normal draws,
    shared across regimens, calibrate the cutoffs at level ``zeta``.
    """
    values = np.asarray(values, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n_g = values.shape[0]
    if cov.shape != (n_g, n_g):
        raise ConfigError("covariance shape does not match the value vector")
    if len(dtr_labels) != n_g:
        raise ConfigError("label count does not match the value vector")
    if not 0.0 < zeta < 1.0:
        raise ConfigError("zeta must lie strictly between 0 and 1")
    if n_mc < 100:
        raise ConfigError("too few calibration draws")
    if rng is None:
        rng = np.random.default_rng(0)

    se = np.zeros((n_g, n_g))
    valid = np.zeros((n_g, n_g), dtype=bool)
    for g in range(n_g):
        for gp in range(n_g):
            if gp == g:
                continue
            var = cov[g, g] + cov[gp, gp] - 2.0 * cov[g, gp]
            if var > _DEGENERATE_VAR:
                se[g, gp] = np.sqrt(var)
                valid[g, gp] = True

    draws = rng.multivariate_normal(
        np.zeros(n_g), cov, size=n_mc, method="eigh"
    )

    cutoffs = np.zeros(n_g)
    gaps = np.zeros(n_g)
    in_set = np.zeros(n_g, dtype=bool)
    margins = np.zeros(n_g)
    for g in range(n_g):
        rivals = np.flatnonzero(valid[g])
        if rivals.size == 0:
            cutoffs[g] = 0.0
            gaps[g] = 0.0
            margins[g] = 0.0
            in_set[g] = True
            continue
        scaled = (draws[:, rivals] - draws[:, [g]]) / se[g, rivals][None, :]
        cutoffs[g] = mcb_cutoff(scaled.max(axis=1), zeta)
        gaps[g] = float(np.max((values[rivals] - values[g]) / se[g, rivals]))
        margins[g] = cutoffs[g] - gaps[g]
        in_set[g] = margins[g] >= 0.0

    return McbResult(
        dtr_labels=tuple(dtr_labels),
        values=values,
        cutoffs=cutoffs,
        gaps=gaps,
        margins=margins,
        in_set=in_set,
        best_index=int(np.argmax(values)),
        zeta=zeta,
        n_mc=n_mc,
    )
