import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bulkiface.solver import load_scenario

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_linear():
    return load_scenario("flat_linear", ["resolution=8", "solver.t_end=0.2"])


@pytest.fixture(scope="session")
def small_polynomial():
    return load_scenario("flat_polynomial", ["resolution=8", "solver.t_end=0.2"])


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
