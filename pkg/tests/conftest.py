import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from svrkit.volume import PhantomSpec, generate_phantom

settings.register_profile("svrkit", max_examples=60, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("svrkit")


@pytest.fixture(scope="session")
def phantom64():
    return generate_phantom(PhantomSpec("nested-ellipsoids", seed=1), 64)


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom(PhantomSpec("nested-ellipsoids", seed=1), 32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
