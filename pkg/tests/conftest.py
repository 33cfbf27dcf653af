import numpy as np
import pytest

from rbcopas.data import MetaDataset
from rbcopas.sampler import SamplerConfig
from rbcopas.simulation import SimConfig, simulate_copas


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def biased_data():
    """n=30 published studies simulated with strong selection (rho=0.9)."""
    return simulate_copas(SimConfig(rho=0.9, seed=3))


@pytest.fixture(scope="session")
def unbiased_data():
    return simulate_copas(SimConfig(rho=0.0, seed=5))


@pytest.fixture(scope="session")
def quick_cfg():
    return SamplerConfig(n_iter=3000, burn_in=1500, n_chains=2, seed=1)


def normal_re_data(n, theta, tau, seed):
    """Plain random-effects data with no selection."""
    r = np.random.default_rng(seed)
    s = r.uniform(0.2, 0.8, n)
    y = theta + tau * r.standard_normal(n) + s * r.standard_normal(n)
    return MetaDataset.from_arrays(y, s)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
