import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prostate_recon.slicing import build_reference_model
from prostate_recon.synthetic import generic_model, minimal_protocol, routine_protocol

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def generic():
    return generic_model()


@pytest.fixture(scope="session")
def routine_model(generic):
    return build_reference_model(generic, routine_protocol())


@pytest.fixture(scope="session")
def minimal_model(generic):
    # 4 central slices L/R only, apex/base 5 mm with one fragment per side
    return build_reference_model(generic, minimal_protocol(central_count=4, offset=5.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria verdicts, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
