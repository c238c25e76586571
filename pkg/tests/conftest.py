import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_params(rng, shape=(), spread=1.0):
    """Valid (mu_x, mu_y, sx, sy, rho) arrays with moderate conditioning."""
    out = np.empty(shape + (5,))
    out[..., :2] = rng.normal(0.0, spread, shape + (2,))
    out[..., 2:4] = np.exp(rng.uniform(-1.0, 0.7, shape + (2,)))
    out[..., 4] = rng.uniform(-0.8, 0.8, shape)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
