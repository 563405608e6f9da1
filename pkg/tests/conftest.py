import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from piml_pacbayes.model import MLPSpec, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_theta():
    """Random 2x8 tanh network."""
    spec = MLPSpec((8, 8))
    return init_params(spec, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
