"""Shared fixtures: one simulated trial and one fitted model per session."""

import numpy as np
import pytest

from smartjm.estimation import FitOptions, ParamLayout, fit_joint_model
from smartjm.model import DesignConfig
from smartjm.simgen import reference_truth, simulate_trial


@pytest.fixture(scope="session")
def cfg():
    return DesignConfig()


@pytest.fixture(scope="session")
def truth():
    return reference_truth()


@pytest.fixture(scope="session")
def layout(cfg):
    return ParamLayout(cfg)


@pytest.fixture(scope="session")
def sim_data(cfg, truth):
    return simulate_trial(314159, 120, truth, cfg)


@pytest.fixture(scope="session")
def sim_small(cfg, truth):
    return simulate_trial(271828, 40, truth, cfg)


@pytest.fixture(scope="session")
def joint_fit(cfg, sim_data):
    fit = fit_joint_model(sim_data, cfg, FitOptions(k_nodes=5))
    assert fit.converged
    return fit


@pytest.fixture()
def rng():
    return np.random.default_rng(987654321)
