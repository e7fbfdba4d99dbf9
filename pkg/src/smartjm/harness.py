"""Replication studies: simulate, fit, evaluate, and summarize.

One study = many independent replications of simulate/fit/estimate at a
fixed design, compared against high-precision truth values.  Per-
replication seeds are derived from the master seed by spawn keys, so a
study gives identical results whether replications run serially or on a
thread pool, and any single replication can be reproduced alone.

The truth pipeline evaluates the plug-in regimen values at the
generating parameters with a deterministic balanced baseline sample:
the binary covariate gets its exact expected split and the continuous
one a quantile lattice within each split, which removes baseline
sampling noise from the reference values.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, DataError
from .estimation import FitOptions, ParamLayout, fit_joint_model
from .gformula import (
    EstimandSpec,
    RegimenValueTable,
    marginal_survival_curve,
    propagate_uncertainty,
    regimen_values,
)
from .iptw import iptw_values, iptw_with_bootstrap
from .mcb import McbResult, mcb_best_set
from .model import SPARSE_SCHEDULE, DesignConfig
from .simgen import DgmTruth, simulate_trial

__all__ = [
    "StudyConfig",
    "ReplicationRecord",
    "StudyMetrics",
    "StudyResult",
    "balanced_baselines",
    "compute_true_values",
    "run_replication",
    "run_study",
    "aggregate_metrics",
]

_METHODS = ("jm", "iptw")


@dataclass(frozen=True)
class StudyConfig:
    """Everything one simulation study needs beyond the trial design."""

    n_subjects: int = 300
    n_replications: int = 100
    seed: int = 20260819
    schedule: str = "dense"
    horizons: tuple[float, ...] = (16.0, 24.0)
    k_fit: int = 5
    k_marginal: int = 3
    n_jm_draws: int = 300
    n_boot: int = 1000
    n_mc: int = 20000
    rmst_grid: int = 100
    truth_grid: int = 500
    truth_draws: int = 5000
    zeta: float = 0.05
    threads: int = 1
    compute_information: bool = True
    coverage_from_average_se: bool = False
    curve_points: int = 25

    def __post_init__(self) -> None:
        for name in (
            "n_subjects",
            "n_replications",
            "k_fit",
            "k_marginal",
            "n_mc",
            "rmst_grid",
            "truth_grid",
            "truth_draws",
            "threads",
            "curve_points",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("n_jm_draws", "n_boot"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if self.schedule not in ("dense", "sparse"):
            raise ConfigError("schedule must be 'dense' or 'sparse'")
        if not self.horizons:
            raise ConfigError("at least one horizon is required")
        if any(h <= 0.0 for h in self.horizons):
            raise ConfigError("horizons must be positive")
        if not 0.0 < self.zeta < 1.0:
            raise ConfigError("zeta must lie strictly between 0 and 1")

    def estimands(self) -> tuple[EstimandSpec, ...]:
        specs: list[EstimandSpec] = []
        for h in self.horizons:
            specs.append(("rmst", float(h)))
        for h in self.horizons:
            specs.append(("survival", float(h)))
        return tuple(specs)

    def resolve_design(self, cfg: DesignConfig) -> DesignConfig:
        if any(h > cfg.t_max for h in self.horizons):
            raise ConfigError("horizons must not exceed the follow-up cap")
        if self.schedule == "sparse":
            return cfg.with_schedule(SPARSE_SCHEDULE)
        return cfg


def balanced_baselines(n: int, truth: DgmTruth) -> np.ndarray:
    """Deterministic baseline sample with exact covariate margins.

    The binary covariate receives exactly round(p * n) ones; within each
    group the continuous covariate sits at standard-normal quantile
    midpoints, so the empirical distribution is a stratified stand-in
    for the generating one without Monte Carlo noise.
    """
    if n < 2:
        raise ConfigError("need at least two baseline draws")
    n_one = int(round(truth.p_x01 * n))
    x01 = np.concatenate([np.ones(n_one), np.zeros(n - n_one)])
    x02 = np.empty(n)
    for count, offset in ((n_one, 0), (n - n_one, n_one)):
        if count == 0:
            continue
        x02[offset : offset + count] = ndtri((np.arange(count) + 0.5) / count)
    return np.column_stack([x01, x02])


def compute_true_values(
    truth: DgmTruth, cfg: DesignConfig, study: StudyConfig | None = None
) -> RegimenValueTable:
    """High-precision regimen values at the generating parameters."""
    study = study or StudyConfig()
    baselines = balanced_baselines(study.truth_draws, truth)
    return regimen_values(
        truth.theta,
        baselines,
        study.estimands(),
        cfg,
        k_nodes=study.k_fit,
        grid_size=study.truth_grid,
    )


@dataclass
class ReplicationRecord:
    rep_index: int
    converged: bool
    n_iter: int
    theta_hat: np.ndarray
    se_theta: np.ndarray | None
    jm_table: RegimenValueTable
    iptw_table: RegimenValueTable
    jm_sets: dict[EstimandSpec, McbResult] | None
    iptw_sets: dict[EstimandSpec, McbResult] | None
    curves: np.ndarray  # (n_dtrs, curve_points) fitted marginal survival
    fit_warnings: tuple[str, ...]


def _mcb_for_table(
    table: RegimenValueTable,
    zeta: float,
    n_mc: int,
    rng: np.random.Generator,
) -> dict[EstimandSpec, McbResult] | None:
    if table.cov is None:
        return None
    out: dict[EstimandSpec, McbResult] = {}
    for spec in table.estimands:
        out[spec] = mcb_best_set(
            table.dtr_labels,
            table.values[spec],
            table.cov[spec],
            zeta=zeta,
            rng=rng,
            n_mc=n_mc,
        )
    return out


def run_replication(
    rep_index: int,
    truth: DgmTruth,
    study: StudyConfig,
    cfg: DesignConfig | None = None,
) -> ReplicationRecord:
    """One simulate/fit/estimate cycle, reproducible from its index."""
    base_cfg = cfg or DesignConfig()
    dcfg = study.resolve_design(base_cfg)
    root = np.random.SeedSequence(entropy=study.seed, spawn_key=(rep_index,))
    ss_sim, ss_jm, ss_boot, ss_mcb = root.spawn(4)

    data = simulate_trial(ss_sim, study.n_subjects, truth, dcfg)
    layout = ParamLayout(dcfg)
    fit = fit_joint_model(
        data,
        dcfg,
        FitOptions(
            k_nodes=study.k_fit, compute_information=study.compute_information
        ),
    )
    baselines = np.array([s.x0 for s in data])
    estimands = study.estimands()

    if study.n_jm_draws > 0 and fit.vcov_working is not None:
        jm_table = propagate_uncertainty(
            fit,
            baselines,
            estimands,
            dcfg,
            rng=np.random.default_rng(ss_jm),
            n_draws=study.n_jm_draws,
            k_nodes=study.k_marginal,
            grid_size=study.rmst_grid,
        )
    else:
        jm_table = regimen_values(
            fit.theta_hat,
            baselines,
            estimands,
            dcfg,
            k_nodes=study.k_marginal,
            grid_size=study.rmst_grid,
        )

    if study.n_boot > 0:
        iptw_table = iptw_with_bootstrap(
            data,
            estimands,
            dcfg,
            rng=np.random.default_rng(ss_boot),
            n_boot=study.n_boot,
        )
    else:
        iptw_table = iptw_values(data, estimands, dcfg)

    rng_mcb = np.random.default_rng(ss_mcb)
    jm_sets = _mcb_for_table(jm_table, study.zeta, study.n_mc, rng_mcb)
    iptw_sets = _mcb_for_table(iptw_table, study.zeta, study.n_mc, rng_mcb)

    grid = np.linspace(0.0, dcfg.t_max, study.curve_points)
    dtrs = dcfg.embedded_dtrs()
    curves = np.empty((len(dtrs), grid.size))
    for j, dtr in enumerate(dtrs):
        curves[j] = marginal_survival_curve(
            grid, baselines, fit.theta_hat, dtr, dcfg, k_nodes=study.k_marginal
        )

    return ReplicationRecord(
        rep_index=rep_index,
        converged=fit.converged,
        n_iter=fit.n_iter,
        theta_hat=layout.to_natural(fit.theta_hat),
        se_theta=None if fit.se is None else fit.se.copy(),
        jm_table=jm_table,
        iptw_table=iptw_table,
        jm_sets=jm_sets,
        iptw_sets=iptw_sets,
        curves=curves,
        fit_warnings=tuple(fit.warnings),
    )


# -- metric aggregation ----------------------------------------------------


@dataclass
class ParamMetrics:
    name: str
    truth: float
    mean: float
    rel_pct: float
    rel_is_absolute_bias: bool
    mcse: float
    rmse: float
    aese: float | None
    cov_pct: float | None


@dataclass
class ValueMetrics:
    method: str
    estimand: EstimandSpec
    dtr: str
    truth: float
    mean: float
    rel_pct: float
    rel_is_absolute_bias: bool
    mcse: float
    rmse: float
    aese: float | None
    cov_pct: float | None


@dataclass
class SelectionMetrics:
    method: str
    estimand: EstimandSpec
    point_pct: float
    mcb_pct: float | None
    avg_set_size: float | None


@dataclass
class ContrastMetrics:
    method: str
    estimand: EstimandSpec
    pair: tuple[str, str]
    truth: float
    mean: float
    mcse: float
    aese: float | None
    cov_pct: float | None


@dataclass
class EfficiencyMetrics:
    estimand: EstimandSpec
    dtr: str
    variance_ratio: float  # jm MCSE^2 over iptw MCSE^2


@dataclass
class StudyMetrics:
    n_replications: int
    convergence_pct: float
    parameters: list[ParamMetrics]
    values: list[ValueMetrics]
    selection: list[SelectionMetrics]
    contrasts: list[ContrastMetrics]
    efficiency: list[EfficiencyMetrics]


@dataclass
class StudyResult:
    study: StudyConfig
    truth_values: RegimenValueTable
    truth_parameters: np.ndarray
    parameter_names: tuple[str, ...]
    records: list[ReplicationRecord]
    metrics: StudyMetrics
    curve_grid: np.ndarray
    mean_curves: np.ndarray        # (n_dtrs, curve_points)
    truth_curves: np.ndarray


def _rel_and_bias(mean: float, truth: float) -> tuple[float, bool]:
    if truth == 0.0:
        return mean, True
    return 100.0 * (mean - truth) / truth, False


def _coverage(
    ests: np.ndarray,
    ses: np.ndarray | None,
    truth: float,
    from_average: bool,
) -> float | None:
    if ses is None:
        return None
    se_used = np.full_like(ests, float(np.mean(ses))) if from_average else ses
    ok = np.abs(ests - truth) <= 1.96 * se_used
    return 100.0 * float(np.mean(ok))


def _table_se(table: RegimenValueTable, spec: EstimandSpec) -> np.ndarray | None:
    if table.cov is None:
        return None
    return table.se(spec)


def aggregate_metrics(
    records: Sequence[ReplicationRecord],
    truth_parameters: np.ndarray,
    parameter_names: Sequence[str],
    truth_values: RegimenValueTable,
    study: StudyConfig,
) -> StudyMetrics:
    """Cross-replication summaries for parameters, values, and selection."""
    if len(records) < 2:
        raise DataError("need at least two replications to aggregate")
    n_rep = len(records)
    from_avg = study.coverage_from_average_se
    convergence_pct = 100.0 * float(np.mean([r.converged for r in records]))

    # Parameters.
    params: list[ParamMetrics] = []
    have_se = all(r.se_theta is not None for r in records)
    est_mat = np.vstack([r.theta_hat for r in records])
    se_mat = np.vstack([r.se_theta for r in records]) if have_se else None
    for j, name in enumerate(parameter_names):
        truth_j = float(truth_parameters[j])
        ests = est_mat[:, j]
        mean = float(np.mean(ests))
        rel, is_abs = _rel_and_bias(mean, truth_j)
        ses = se_mat[:, j] if se_mat is not None else None
        params.append(
            ParamMetrics(
                name=name,
                truth=truth_j,
                mean=mean,
                rel_pct=rel,
                rel_is_absolute_bias=is_abs,
                mcse=float(np.std(ests, ddof=1)),
                rmse=float(np.sqrt(np.mean((ests - truth_j) ** 2))),
                aese=None if ses is None else float(np.mean(ses)),
                cov_pct=_coverage(ests, ses, truth_j, from_avg),
            )
        )

    # Regimen values, selection, contrasts, efficiency.
    labels = truth_values.dtr_labels
    n_dtrs = len(labels)
    values: list[ValueMetrics] = []
    selection: list[SelectionMetrics] = []
    contrasts: list[ContrastMetrics] = []
    efficiency: list[EfficiencyMetrics] = []
    mcse_by: dict[tuple[str, EstimandSpec, int], float] = {}

    for method in _METHODS:
        for spec in study.estimands():
            truth_vec = truth_values.values[spec]
            est_rows = np.vstack(
                [
                    (r.jm_table if method == "jm" else r.iptw_table).values[spec]
                    for r in records
                ]
            )
            se_rows_list = [
                _table_se(r.jm_table if method == "jm" else r.iptw_table, spec)
                for r in records
            ]
            have_val_se = all(s is not None for s in se_rows_list)
            se_rows = np.vstack(se_rows_list) if have_val_se else None

            for g in range(n_dtrs):
                truth_g = float(truth_vec[g])
                ests = est_rows[:, g]
                mean = float(np.mean(ests))
                rel, is_abs = _rel_and_bias(mean, truth_g)
                ses_g = se_rows[:, g] if se_rows is not None else None
                mcse = float(np.std(ests, ddof=1))
                mcse_by[(method, spec, g)] = mcse
                values.append(
                    ValueMetrics(
                        method=method,
                        estimand=spec,
                        dtr=labels[g],
                        truth=truth_g,
                        mean=mean,
                        rel_pct=rel,
                        rel_is_absolute_bias=is_abs,
                        mcse=mcse,
                        rmse=float(np.sqrt(np.mean((ests - truth_g) ** 2))),
                        aese=None if ses_g is None else float(np.mean(ses_g)),
                        cov_pct=_coverage(ests, ses_g, truth_g, from_avg),
                    )
                )

            best_true = int(np.argmax(truth_vec))
            picks = np.argmax(est_rows, axis=1)
            sets = [
                (r.jm_sets if method == "jm" else r.iptw_sets) for r in records
            ]
            have_sets = all(s is not None for s in sets)
            selection.append(
                SelectionMetrics(
                    method=method,
                    estimand=spec,
                    point_pct=100.0 * float(np.mean(picks == best_true)),
                    mcb_pct=(
                        100.0
                        * float(
                            np.mean([s[spec].in_set[best_true] for s in sets])
                        )
                        if have_sets
                        else None
                    ),
                    avg_set_size=(
                        float(np.mean([s[spec].set_size for s in sets]))
                        if have_sets
                        else None
                    ),
                )
            )

            for g in range(n_dtrs):
                for gp in range(g + 1, n_dtrs):
                    diffs = est_rows[:, g] - est_rows[:, gp]
                    truth_d = float(truth_vec[g] - truth_vec[gp])
                    if have_val_se:
                        covs = [
                            (r.jm_table if method == "jm" else r.iptw_table).cov[
                                spec
                            ]
                            for r in records
                        ]
                        d_ses = np.array(
                            [
                                np.sqrt(
                                    max(
                                        c[g, g] + c[gp, gp] - 2.0 * c[g, gp], 0.0
                                    )
                                )
                                for c in covs
                            ]
                        )
                    else:
                        d_ses = None
                    contrasts.append(
                        ContrastMetrics(
                            method=method,
                            estimand=spec,
                            pair=(labels[g], labels[gp]),
                            truth=truth_d,
                            mean=float(np.mean(diffs)),
                            mcse=float(np.std(diffs, ddof=1)),
                            aese=None if d_ses is None else float(np.mean(d_ses)),
                            cov_pct=_coverage(diffs, d_ses, truth_d, from_avg),
                        )
                    )

    for spec in study.estimands():
        for g in range(n_dtrs):
            iptw_var = mcse_by[("iptw", spec, g)] ** 2
            jm_var = mcse_by[("jm", spec, g)] ** 2
            ratio = jm_var / iptw_var if iptw_var > 0.0 else float("inf")
            efficiency.append(
                EfficiencyMetrics(estimand=spec, dtr=labels[g], variance_ratio=ratio)
            )

    return StudyMetrics(
        n_replications=n_rep,
        convergence_pct=convergence_pct,
        parameters=params,
        values=values,
        selection=selection,
        contrasts=contrasts,
        efficiency=efficiency,
    )


def run_study(
    truth: DgmTruth,
    study: StudyConfig,
    cfg: DesignConfig | None = None,
    progress: Callable[[ReplicationRecord], None] | None = None,
) -> StudyResult:
    """Run all replications, the truth pipeline, and the aggregation."""
    base_cfg = cfg or DesignConfig()
    dcfg = study.resolve_design(base_cfg)
    layout = ParamLayout(dcfg)
    truth_table = compute_true_values(truth, dcfg, study)
    truth_nat = layout.to_natural(truth.theta)

    def one(rep_index: int) -> ReplicationRecord:
        record = run_replication(rep_index, truth, study, base_cfg)
        if progress is not None:
            progress(record)
        return record

    indices = range(study.n_replications)
    if study.threads > 1:
        with ThreadPoolExecutor(max_workers=study.threads) as pool:
            records = list(pool.map(one, indices))
    else:
        records = [one(i) for i in indices]

    metrics = aggregate_metrics(
        records, truth_nat, layout.names, truth_table, study
    )

    grid = np.linspace(0.0, dcfg.t_max, study.curve_points)
    dtrs = dcfg.embedded_dtrs()
    truth_baselines = balanced_baselines(study.truth_draws, truth)
    truth_curves = np.empty((len(dtrs), grid.size))
    for j, dtr in enumerate(dtrs):
        truth_curves[j] = marginal_survival_curve(
            grid, truth_baselines, truth.theta, dtr, dcfg, k_nodes=study.k_fit
        )
    mean_curves = np.mean(np.stack([r.curves for r in records]), axis=0)

    return StudyResult(
        study=study,
        truth_values=truth_table,
        truth_parameters=truth_nat,
        parameter_names=layout.names,
        records=records,
        metrics=metrics,
        curve_grid=grid,
        mean_curves=mean_curves,
        truth_curves=truth_curves,
    )
