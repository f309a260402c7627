import numpy as np
import pytest

from noisy_feature_lab.config import ExperimentConfig
from noisy_feature_lab.datagen import Dataset
from noisy_feature_lab.model import ModelWeights
from noisy_feature_lab.trainer import train

SMALL = ExperimentConfig(d=200, n=20, m=5, mu_mag=5.0, tau_plus=0.1, tau_minus=0.1,
                         T=40, n_test=500, snapshot_stride=5)


def random_instance(rng, d, n, m, scale=1.0, mu_mag=None):
    """Small dataset and weights drawn from ``rng`` (n even, balanced labels)."""
    y = np.array([1, -1] * (n // 2))
    rng.shuffle(y)
    flip = rng.random(n) < 0.3
    mu = np.zeros(d)
    mu[0] = mu_mag if mu_mag is not None else rng.uniform(0.5, 3.0)
    ds = Dataset(y=y, y_obs=np.where(flip, -y, y), slot_b=rng.random(n) < 0.5,
                 noise=rng.standard_normal((n, d)), mu=mu, sigma_xi=1.0)
    w0 = scale * rng.standard_normal((2, m, d))
    return ds, ModelWeights(w=w0.copy(), w0=w0, sigma_0=scale, seed_init=0)


@pytest.fixture(scope="session")
def small_run():
    return train(SMALL)


@pytest.fixture(scope="session")
def default_run():
    return train(ExperimentConfig())


# one line per acceptance criterion, printed after the run
GATE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for k in sorted(GATE_LINES):
            terminalreporter.write_line(GATE_LINES[k])
