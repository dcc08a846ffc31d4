import numpy as np
import pytest

import cskgp  # noqa: F401  (enables float64 in jax)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiments")
