"""Study configuration, truth pipeline, and metric aggregation."""

import dataclasses

import numpy as np
import pytest

from smartjm import (
    ConfigError,
    DataError,
    StudyConfig,
    balanced_baselines,
    compute_true_values,
    run_replication,
    run_study,
    aggregate_metrics,
)
from smartjm.gformula import RegimenValueTable
from smartjm.harness import ReplicationRecord
from smartjm.mcb import McbResult
from smartjm.model import SPARSE_SCHEDULE, DesignConfig

LABELS = ("AAC", "AAD", "BBC", "BBD")
RMST16 = ("rmst", 16.0)
SURV16 = ("survival", 16.0)


# -- StudyConfig -------------------------------------------------------------


@pytest.mark.parametrize(
    "field, value, fragment",
    [
        ("n_subjects", 0, "n_subjects"),
        ("n_replications", 0, "n_replications"),
        ("k_fit", 0, "k_fit"),
        ("n_jm_draws", -1, "n_jm_draws"),
        ("n_boot", -2, "n_boot"),
        ("schedule", "weekly", "schedule"),
        ("horizons", (), "horizon"),
        ("horizons", (16.0, -2.0), "positive"),
        ("zeta", 0.0, "zeta"),
        ("zeta", 1.0, "zeta"),
        ("threads", 0, "threads"),
    ],
)
def test_study_config_rejects_bad_fields(field, value, fragment):
    with pytest.raises(ConfigError, match=fragment):
        dataclasses.replace(StudyConfig(), **{field: value})


def test_study_config_defaults_and_estimand_order():
    study = StudyConfig()
    assert study.n_subjects == 300
    assert study.horizons == (16.0, 24.0)
    # All restricted-mean estimands first, then the survival probabilities.
    assert study.estimands() == (
        ("rmst", 16.0),
        ("rmst", 24.0),
        ("survival", 16.0),
        ("survival", 24.0),
    )


def test_resolve_design_sparse_swaps_schedule(cfg):
    sparse = dataclasses.replace(StudyConfig(), schedule="sparse")
    assert sparse.resolve_design(cfg).measurement_schedule == SPARSE_SCHEDULE
    assert (
        StudyConfig().resolve_design(cfg).measurement_schedule
        == cfg.measurement_schedule
    )


def test_resolve_design_rejects_horizon_past_follow_up(cfg):
    study = dataclasses.replace(StudyConfig(), horizons=(16.0, 30.0))
    with pytest.raises(ConfigError, match="follow-up"):
        study.resolve_design(cfg)


# -- balanced baseline lattice ----------------------------------------------


def test_balanced_baselines_margins(truth):
    draws = balanced_baselines(10, truth)
    assert draws.shape == (10, 2)
    # Binary column carries exactly round(0.6 * 10) ones.
    assert draws[:, 0].sum() == pytest.approx(6.0)
    assert set(np.unique(draws[:, 0])) == {0.0, 1.0}
    # Quantile midpoints are symmetric, so each group averages to zero.
    for flag in (0.0, 1.0):
        assert np.mean(draws[draws[:, 0] == flag, 1]) == pytest.approx(
            0.0, abs=1e-12
        )


def test_balanced_baselines_quantile_values(truth):
    from scipy.special import ndtri

    draws = balanced_baselines(10, truth)
    expected_first = ndtri((np.arange(6) + 0.5) / 6)
    np.testing.assert_allclose(draws[:6, 1], expected_first, rtol=1e-13)


def test_balanced_baselines_deterministic(truth):
    np.testing.assert_array_equal(
        balanced_baselines(57, truth), balanced_baselines(57, truth)
    )


def test_balanced_baselines_needs_two(truth):
    with pytest.raises(ConfigError, match="two"):
        balanced_baselines(1, truth)


# -- truth pipeline ----------------------------------------------------------


def test_compute_true_values_structure(truth, cfg):
    study = dataclasses.replace(
        StudyConfig(), truth_draws=60, truth_grid=120, k_fit=3
    )
    table = compute_true_values(truth, cfg, study)
    assert table.dtr_labels == LABELS
    assert table.estimands == study.estimands()
    assert table.cov is None
    rmst16 = table.values[("rmst", 16.0)]
    rmst24 = table.values[("rmst", 24.0)]
    surv16 = table.values[("survival", 16.0)]
    surv24 = table.values[("survival", 24.0)]
    assert np.all(rmst24 > rmst16)
    assert np.all((surv16 > surv24) & (surv24 > 0.0) & (surv16 < 1.0))
    # Generating parameters favor the A then C sequence on every estimand.
    for vec in (rmst16, rmst24, surv16, surv24):
        assert int(np.argmax(vec)) == 0


# -- hand-built aggregation fixture -------------------------------------------


def _mcb_stub(in_set):
    mask = np.asarray(in_set, dtype=bool)
    return McbResult(
        dtr_labels=LABELS,
        values=np.zeros(4),
        cutoffs=np.zeros(4),
        gaps=np.zeros(4),
        margins=np.zeros(4),
        in_set=mask,
        best_index=0,
        zeta=0.05,
        n_mc=100,
    )


def _table(rmst_row, surv_row, cov_rmst=None, cov_surv=None):
    cov = None
    if cov_rmst is not None:
        cov = {RMST16: np.asarray(cov_rmst), SURV16: np.asarray(cov_surv)}
    return RegimenValueTable(
        dtr_labels=LABELS,
        estimands=(RMST16, SURV16),
        values={
            RMST16: np.asarray(rmst_row, dtype=float),
            SURV16: np.asarray(surv_row, dtype=float),
        },
        cov=cov,
    )


TRUTH_RMST = np.array([10.0, 8.0, 6.0, 4.0])
TRUTH_SURV = np.array([0.5, 0.4, 0.3, 0.2])
TRUTH_PARAMS = np.array([2.0, 0.0, -1.0])
PARAM_NAMES = ("p_one", "p_zero", "p_neg")

# Covariance shared by every jm table: se 0.2 per regimen plus a positive
# BBC/BBD covariance that shrinks that contrast's standard error to 0.2.
COV_RMST = np.diag([0.04, 0.04, 0.04, 0.04])
COV_RMST[2, 3] = COV_RMST[3, 2] = 0.02
COV_SURV = np.diag([0.01, 0.01, 0.01, 0.01])


def _fixture_records():
    jm_rmst = [
        [10.1, 8.0, 6.0, 4.0],
        [9.9, 8.0, 6.0, 4.0],
        [10.1, 8.0, 6.0, 4.0],
        [9.9, 9.95, 6.0, 4.0],  # lone replication that picks AAD
    ]
    iptw_rmst = [
        [10.2, 8.0, 6.0, 4.0],
        [9.8, 8.0, 6.0, 4.0],
        [10.2, 8.0, 6.0, 4.0],
        [9.8, 8.0, 6.0, 4.0],
    ]
    theta = [
        [1.8, 0.1, -1.0],
        [2.2, 0.1, -1.0],
        [1.9, 0.1, -1.01],
        [2.1, 0.1, -1.01],
    ]
    se3 = [0.02, 0.02, 0.001, 0.001]
    jm_set_patterns = [
        [True, False, False, False],
        [True, True, False, False],
        [True, False, False, False],
        [False, True, True, True],  # best regimen dropped once
    ]
    records = []
    for i in range(4):
        jm_sets = {
            RMST16: _mcb_stub(jm_set_patterns[i]),
            SURV16: _mcb_stub([True, False, False, False]),
        }
        records.append(
            ReplicationRecord(
                rep_index=i,
                converged=i != 3,
                n_iter=40 + i,
                theta_hat=np.asarray(theta[i]),
                se_theta=np.asarray([1.0, 0.5, se3[i]]),
                jm_table=_table(jm_rmst[i], TRUTH_SURV, COV_RMST, COV_SURV),
                iptw_table=_table(iptw_rmst[i], TRUTH_SURV),
                jm_sets=jm_sets,
                iptw_sets=None,
                curves=np.zeros((4, 3)),
                fit_warnings=(),
            )
        )
    return records


@pytest.fixture(scope="module")
def agg():
    study = dataclasses.replace(StudyConfig(), horizons=(16.0,))
    truth_table = _table(TRUTH_RMST, TRUTH_SURV)
    return aggregate_metrics(
        _fixture_records(), TRUTH_PARAMS, PARAM_NAMES, truth_table, study
    )


def test_aggregate_convergence_and_count(agg):
    assert agg.n_replications == 4
    assert agg.convergence_pct == pytest.approx(75.0)


def test_aggregate_parameter_metrics(agg):
    by_name = {p.name: p for p in agg.parameters}
    p1 = by_name["p_one"]
    assert p1.mean == pytest.approx(2.0)
    assert p1.rel_pct == pytest.approx(0.0, abs=1e-12)
    assert not p1.rel_is_absolute_bias
    assert p1.mcse == pytest.approx(np.std([1.8, 2.2, 1.9, 2.1], ddof=1))
    assert p1.rmse == pytest.approx(np.sqrt(0.025))
    assert p1.aese == pytest.approx(1.0)
    assert p1.cov_pct == pytest.approx(100.0)

    # Zero truth switches the relative column to plain bias.
    p0 = by_name["p_zero"]
    assert p0.rel_is_absolute_bias
    assert p0.rel_pct == pytest.approx(0.1)
    assert p0.mcse == pytest.approx(0.0, abs=1e-15)

    p3 = by_name["p_neg"]
    assert p3.rel_pct == pytest.approx(0.5, abs=1e-9)
    assert p3.aese == pytest.approx(0.0105)
    # Two replications carry a 0.01 error against a 0.001 standard error.
    assert p3.cov_pct == pytest.approx(50.0)


def test_coverage_from_average_se_switch():
    study = dataclasses.replace(
        StudyConfig(), horizons=(16.0,), coverage_from_average_se=True
    )
    truth_table = _table(TRUTH_RMST, TRUTH_SURV)
    metrics = aggregate_metrics(
        _fixture_records(), TRUTH_PARAMS, PARAM_NAMES, truth_table, study
    )
    p3 = {p.name: p for p in metrics.parameters}["p_neg"]
    # The averaged standard error 0.0105 covers every replication.
    assert p3.cov_pct == pytest.approx(100.0)


def test_aggregate_value_metrics(agg):
    jm_aac = next(
        v
        for v in agg.values
        if v.method == "jm" and v.estimand == RMST16 and v.dtr == "AAC"
    )
    assert jm_aac.truth == pytest.approx(10.0)
    assert jm_aac.mean == pytest.approx(10.0)
    assert jm_aac.rel_pct == pytest.approx(0.0, abs=1e-12)
    assert jm_aac.mcse == pytest.approx(0.1 * np.sqrt(4.0 / 3.0))
    assert jm_aac.rmse == pytest.approx(0.1)
    assert jm_aac.aese == pytest.approx(0.2)
    assert jm_aac.cov_pct == pytest.approx(100.0)

    iptw_aac = next(
        v
        for v in agg.values
        if v.method == "iptw" and v.estimand == RMST16 and v.dtr == "AAC"
    )
    assert iptw_aac.mcse == pytest.approx(0.2 * np.sqrt(4.0 / 3.0))
    assert iptw_aac.aese is None
    assert iptw_aac.cov_pct is None

    jm_aad = next(
        v
        for v in agg.values
        if v.method == "jm" and v.estimand == RMST16 and v.dtr == "AAD"
    )
    # One replication misses by 1.95 against se 0.2: covered 3 of 4 times.
    assert jm_aad.cov_pct == pytest.approx(75.0)


def test_aggregate_selection_metrics(agg):
    jm_sel = next(
        s for s in agg.selection if s.method == "jm" and s.estimand == RMST16
    )
    assert jm_sel.point_pct == pytest.approx(75.0)
    assert jm_sel.mcb_pct == pytest.approx(75.0)
    # Set sizes 1, 2, 1, 3 across the four replications.
    assert jm_sel.avg_set_size == pytest.approx(1.75)

    iptw_sel = next(
        s for s in agg.selection if s.method == "iptw" and s.estimand == RMST16
    )
    assert iptw_sel.point_pct == pytest.approx(100.0)
    assert iptw_sel.mcb_pct is None
    assert iptw_sel.avg_set_size is None

    jm_surv = next(
        s for s in agg.selection if s.method == "jm" and s.estimand == SURV16
    )
    assert jm_surv.point_pct == pytest.approx(100.0)
    assert jm_surv.mcb_pct == pytest.approx(100.0)
    assert jm_surv.avg_set_size == pytest.approx(1.0)


def test_aggregate_contrast_metrics(agg):
    pair = next(
        c
        for c in agg.contrasts
        if c.method == "jm"
        and c.estimand == RMST16
        and c.pair == ("BBC", "BBD")
    )
    assert pair.truth == pytest.approx(2.0)
    assert pair.mean == pytest.approx(2.0)
    assert pair.mcse == pytest.approx(0.0, abs=1e-15)
    # Var 0.04 + 0.04 minus twice the 0.02 covariance leaves se 0.2.
    assert pair.aese == pytest.approx(0.2)
    assert pair.cov_pct == pytest.approx(100.0)
    # 2 methods x 2 estimands x 6 pairs.
    assert len(agg.contrasts) == 24


def test_aggregate_efficiency_metrics(agg):
    eff = next(
        e for e in agg.efficiency if e.estimand == RMST16 and e.dtr == "AAC"
    )
    # jm spread 0.1 versus iptw spread 0.2 under the same sign pattern.
    assert eff.variance_ratio == pytest.approx(0.25, rel=1e-12)
    degenerate = next(
        e for e in agg.efficiency if e.estimand == RMST16 and e.dtr == "BBD"
    )
    assert degenerate.variance_ratio == np.inf


def test_aggregate_order_invariance(agg):
    study = dataclasses.replace(StudyConfig(), horizons=(16.0,))
    truth_table = _table(TRUTH_RMST, TRUTH_SURV)
    flipped = aggregate_metrics(
        list(reversed(_fixture_records())),
        TRUTH_PARAMS,
        PARAM_NAMES,
        truth_table,
        study,
    )
    assert flipped.convergence_pct == agg.convergence_pct
    for a, b in zip(flipped.parameters, agg.parameters):
        assert a.mean == pytest.approx(b.mean)
        assert a.mcse == pytest.approx(b.mcse)
    for a, b in zip(flipped.selection, agg.selection):
        assert a.point_pct == b.point_pct
        assert a.mcb_pct == b.mcb_pct


def test_aggregate_needs_two_records():
    study = dataclasses.replace(StudyConfig(), horizons=(16.0,))
    truth_table = _table(TRUTH_RMST, TRUTH_SURV)
    with pytest.raises(DataError, match="two"):
        aggregate_metrics(
            _fixture_records()[:1], TRUTH_PARAMS, PARAM_NAMES, truth_table, study
        )


# -- replication and study drivers --------------------------------------------


FAST_STUDY = dataclasses.replace(
    StudyConfig(),
    n_subjects=60,
    n_replications=2,
    n_jm_draws=0,
    n_boot=0,
    compute_information=False,
    k_fit=3,
    k_marginal=3,
    rmst_grid=60,
    truth_grid=150,
    truth_draws=80,
    curve_points=12,
)


def test_run_replication_reproducible(truth):
    first = run_replication(0, truth, FAST_STUDY)
    second = run_replication(0, truth, FAST_STUDY)
    np.testing.assert_array_equal(first.theta_hat, second.theta_hat)
    for spec in FAST_STUDY.estimands():
        np.testing.assert_array_equal(
            first.jm_table.values[spec], second.jm_table.values[spec]
        )
        np.testing.assert_array_equal(
            first.iptw_table.values[spec], second.iptw_table.values[spec]
        )
    np.testing.assert_array_equal(first.curves, second.curves)
    assert first.jm_sets is None and first.iptw_sets is None
    assert first.se_theta is None

    other = run_replication(1, truth, FAST_STUDY)
    assert not np.array_equal(first.theta_hat, other.theta_hat)


def test_run_study_small(truth):
    result = run_study(truth, FAST_STUDY)
    assert [r.rep_index for r in result.records] == [0, 1]
    assert result.metrics.n_replications == 2
    assert result.parameter_names[0] == "beta0"
    assert result.mean_curves.shape == (4, 12)
    assert result.truth_curves.shape == (4, 12)
    assert result.curve_grid[0] == 0.0 and result.curve_grid[-1] == 24.0
    # Survival curves start at one and never increase.
    assert np.allclose(result.truth_curves[:, 0], 1.0)
    assert np.all(np.diff(result.truth_curves, axis=1) <= 1e-12)
    # Any single replication is reproducible outside the study loop.
    alone = run_replication(1, truth, FAST_STUDY)
    np.testing.assert_array_equal(alone.theta_hat, result.records[1].theta_hat)
    # Selection metrics cover both methods for all four estimands.
    assert len(result.metrics.selection) == 8
    assert len(result.metrics.efficiency) == 16


def test_run_study_threaded_matches_serial(truth):
    serial = run_study(truth, FAST_STUDY)
    threaded = run_study(truth, dataclasses.replace(FAST_STUDY, threads=2))
    for a, b in zip(serial.records, threaded.records):
        np.testing.assert_array_equal(a.theta_hat, b.theta_hat)
    np.testing.assert_array_equal(serial.mean_curves, threaded.mean_curves)
