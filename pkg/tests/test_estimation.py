"""Parameter packing, likelihood composition, analytic score, and fitting."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from smartjm.estimation import (
    FitOptions,
    ParamLayout,
    build_quadrature_plans,
    complete_data_loglik,
    fit_joint_model,
    initialize_theta,
    observed_information,
    observed_loglik,
    observed_score,
)
from smartjm.longitudinal import (
    build_subject_design,
    lmm_conditional_logdensity,
    lmm_marginal_loglik,
    theta_lmm_parts,
)
from smartjm.survival import HazardContext, survival_logdensity

EXPECTED_NAMES = (
    "beta0",
    "beta_x01",
    "beta_x02",
    "beta_t",
    "beta_A",
    "beta_B",
    "beta_C",
    "sigma_b0",
    "sigma_b1",
    "rho",
    "sigma_eps",
    "lambda0",
    "kappa",
    "gamma_x01",
    "gamma_x02",
    "gamma_A",
    "gamma_AA",
    "gamma_BB",
    "gamma_AC",
    "gamma_BC",
    "alpha",
)


def test_layout_names_and_slices(layout):
    assert layout.names == EXPECTED_NAMES
    assert layout.names[layout.beta_slice] == EXPECTED_NAMES[0:7]
    assert layout.names[layout.gamma_slice] == EXPECTED_NAMES[13:20]
    assert layout.index("alpha") == 20
    assert layout.index("rho") == 9


def test_layout_natural_round_trip(layout, truth):
    nat = layout.to_natural(truth.theta)
    assert nat.shape == (21,)
    th = layout.from_natural(nat)
    np.testing.assert_allclose(layout.to_natural(th), nat, atol=1e-14)


def test_layout_working_round_trip(layout, truth):
    nat = layout.to_natural(truth.theta)
    work = layout.working_from_natural(nat)
    back = layout.natural_from_working(work)
    np.testing.assert_allclose(back, nat, rtol=1e-12, atol=1e-12)
    # Positive parameters map through log, the correlation through atanh.
    assert work[layout.i_sigma_b0] == pytest.approx(np.log(nat[layout.i_sigma_b0]))
    assert work[layout.i_rho] == pytest.approx(np.arctanh(nat[layout.i_rho]))
    assert work[layout.i_lambda0] == pytest.approx(np.log(nat[layout.i_lambda0]))


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_layout_round_trip_random_working_points(seed):
    from smartjm.model import DesignConfig

    layout = ParamLayout(DesignConfig())
    rng = np.random.default_rng(seed)
    bounds = np.asarray(layout.bounds())
    lo = np.maximum(bounds[:, 0], -3.0)
    hi = np.minimum(bounds[:, 1], 3.0)
    work = rng.uniform(lo, hi)
    nat = layout.natural_from_working(work)
    np.testing.assert_allclose(
        layout.working_from_natural(nat), work, rtol=1e-10, atol=1e-10
    )


def test_layout_jacobian_matches_finite_difference(layout, truth):
    work = layout.to_working(truth.theta)
    jac = layout.jacobian(work)
    h = 1e-6
    for j in range(work.shape[0]):
        wp = work.copy()
        wm = work.copy()
        wp[j] += h
        wm[j] -= h
        fd = (layout.natural_from_working(wp)[j] - layout.natural_from_working(wm)[j]) / (
            2.0 * h
        )
        assert jac[j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_complete_data_loglik_composition(cfg, truth, sim_data):
    # The joint complete-data density is longitudinal given effects,
    # survival given effects, plus the bivariate normal effects prior.
    th = truth.theta
    beta, sigma_eps, G = theta_lmm_parts(th, cfg)
    rec = sim_data[3]
    b = (0.31, -0.12)
    d = build_subject_design(rec, cfg)
    ll_long = lmm_conditional_logdensity(d.y, d.X, d.Z, np.asarray(b), beta, sigma_eps)
    ctx = HazardContext(x0=rec.x0, b=b, v1=rec.v1, v2=rec.v2, theta=th, cfg=cfg)
    ll_surv = survival_logdensity(rec.obs_time, rec.event, ctx)
    ll_prior = float(stats.multivariate_normal.logpdf(b, mean=[0.0, 0.0], cov=G))
    got = complete_data_loglik(rec, np.asarray(b), th, cfg)
    assert got == pytest.approx(ll_long + ll_surv + ll_prior, abs=1e-10)


def test_observed_loglik_finite_and_reproducible(cfg, truth, sim_small):
    plans = _plans(cfg, truth, sim_small)
    ll1 = observed_loglik(sim_small, truth.theta, plans, cfg)
    ll2 = observed_loglik(sim_small, truth.theta, plans, cfg)
    assert np.isfinite(ll1)
    assert ll1 == ll2


def _plans(cfg, truth, data, k_nodes=5):
    beta, sigma_eps, G = theta_lmm_parts(truth.theta, cfg)
    return build_quadrature_plans(data, beta, sigma_eps, G, cfg, k_nodes=k_nodes)


def test_score_matches_finite_differences(cfg, truth, sim_small, layout):
    # Acceptance property: analytic score against central differences of
    # the observed log-likelihood, elementwise relative error <= 1e-4.
    plans = _plans(cfg, truth, sim_small)
    rng = np.random.default_rng(42)
    nat = layout.to_natural(truth.theta)
    nat = nat * (1.0 + 0.05 * rng.standard_normal(nat.shape))
    theta = layout.from_natural(nat)

    score = observed_score(sim_small, theta, plans, cfg)
    assert score.shape == (21,)

    for j, name in enumerate(layout.names):
        h = 1e-5 * max(1.0, abs(nat[j]))
        np_ = nat.copy()
        nm = nat.copy()
        np_[j] += h
        nm[j] -= h
        fd = (
            observed_loglik(sim_small, layout.from_natural(np_), plans, cfg)
            - observed_loglik(sim_small, layout.from_natural(nm), plans, cfg)
        ) / (2.0 * h)
        denom = max(1.0, abs(fd))
        assert abs(score[j] - fd) / denom <= 1e-4, (name, score[j], fd)


def test_alpha_zero_separates_submodels(cfg, truth, sim_small):
    # With no biomarker-hazard link, the joint likelihood factorizes into
    # the mixed-model marginal plus an effects-free survival likelihood.
    th = replace(truth.theta, alpha=0.0)
    plans = _plans(cfg, truth, sim_small)
    joint = observed_loglik(sim_small, th, plans, cfg)

    beta, sigma_eps, G = theta_lmm_parts(th, cfg)
    designs = [build_subject_design(r, cfg) for r in sim_small]
    ll_long = lmm_marginal_loglik(designs, beta, sigma_eps, G)
    ll_surv = 0.0
    for rec in sim_small:
        ctx = HazardContext(x0=rec.x0, b=(0.0, 0.0), v1=rec.v1, v2=rec.v2,
                            theta=th, cfg=cfg)
        ll_surv += survival_logdensity(rec.obs_time, rec.event, ctx)
    assert abs(joint - (ll_long + ll_surv)) <= 1e-8 * max(1.0, abs(joint))


def test_initialize_theta(cfg, sim_data):
    init = initialize_theta(sim_data, cfg)
    assert init.lmm.converged
    th = init.theta
    th.validate()
    assert th.alpha == 0.0
    assert th.lambda0 > 0.0 and th.kappa > 0.0


def test_fit_recovers_truth_within_sampling_error(cfg, truth, layout, joint_fit):
    fit = joint_fit
    assert fit.converged
    assert fit.se is not None
    assert np.all(fit.se > 0.0)
    nat_hat = layout.to_natural(fit.theta_hat)
    nat_true = layout.to_natural(truth.theta)
    z = np.abs(nat_hat - nat_true) / fit.se
    # 21 two-sided checks at n=120: allow a generous 5-sigma envelope.
    assert np.all(z < 5.0), dict(zip(layout.names, np.round(z, 2)))


def test_fit_improves_on_initial_values(cfg, sim_data, joint_fit):
    init = initialize_theta(sim_data, cfg)
    beta, sigma_eps, G = theta_lmm_parts(init.theta, cfg)
    plans = build_quadrature_plans(sim_data, beta, sigma_eps, G, cfg, k_nodes=5)
    ll_init = observed_loglik(sim_data, init.theta, plans, cfg)
    assert joint_fit.loglik >= ll_init - 1e-9


def test_fit_vcov_is_symmetric_psd(joint_fit):
    v = joint_fit.vcov_working
    assert v is not None
    np.testing.assert_allclose(v, v.T, atol=1e-10)
    evals = np.linalg.eigvalsh(0.5 * (v + v.T))
    assert evals.min() >= -1e-8 * max(1.0, evals.max())


def test_observed_information_symmetric(cfg, truth, sim_small):
    plans = _plans(cfg, truth, sim_small)
    info = observed_information(sim_small, truth.theta, plans, cfg)
    assert info.shape == (21, 21)
    np.testing.assert_allclose(info, info.T, atol=1e-6)


def test_loglik_stable_in_node_count(cfg, truth, sim_small):
    # Pseudo-adaptive placement should make the likelihood nearly
    # insensitive to the node count for a well-behaved sample.
    ll5 = observed_loglik(sim_small, truth.theta, _plans(cfg, truth, sim_small, 5), cfg)
    ll7 = observed_loglik(sim_small, truth.theta, _plans(cfg, truth, sim_small, 7), cfg)
    assert abs(ll5 - ll7) < 0.05


def test_se_for_lookup(joint_fit, layout):
    assert joint_fit.se_for("alpha") == pytest.approx(fit_se(joint_fit, layout, "alpha"))


def fit_se(fit, layout, name):
    return float(fit.se[layout.index(name)])
