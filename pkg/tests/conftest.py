import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdpersist.domain import build_domain

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def torus64():
    return build_domain("torus", 1, 2 * np.pi, 64)


@pytest.fixture(scope="session")
def neumann_pi():
    return build_domain("neumann", 1, np.pi, 64)


@pytest.fixture(scope="session")
def torus2d():
    return build_domain("torus", 2, (2 * np.pi, 2 * np.pi), (32, 32))


@pytest.fixture(scope="session")
def small_torus():
    return build_domain("torus", 1, 2 * np.pi, 8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
