import numpy as np
import pytest

from donorselect.app.core.models import SimConfig
from donorselect.app.core.simulator import simulate
from tests.helpers import make_panel


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo acceptance runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_sim_config():
    return SimConfig(n_donors=200, seed=11)


@pytest.fixture
def small_trace(small_sim_config):
    return simulate(small_sim_config)


@pytest.fixture
def linear_panel(rng):
    """Target exactly 2 * d0 + 3 before the intervention and 2 * d0 + 3 + 2 after"""
    n_pre, n_post = 30, 10
    donors = np.cumsum(rng.standard_normal((3, n_pre + n_post)), axis=1)
    indicator = (np.arange(n_pre + n_post) >= n_pre).astype(float)
    target = 2.0 * donors[0] + 3.0 + 2.0 * indicator
    return make_panel(target, donors, n_pre)
