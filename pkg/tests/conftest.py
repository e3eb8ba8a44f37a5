import warnings

import numpy as np
import pytest

from tubecbf.config import preset
from tubecbf.simulator import synthesize_tubes

warnings.filterwarnings("ignore", module="cvxpy")


@pytest.fixture(scope="session")
def five_cfg():
    return preset("paper-5agent")


@pytest.fixture(scope="session")
def five_tubes(five_cfg):
    return synthesize_tubes(five_cfg)


@pytest.fixture(scope="session")
def two_cfg():
    return preset("two-agent")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def record_criterion():
    """Store and print one verdict line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
