import numpy as np
import pytest

from msgan.autodiff.tensor import precision


@pytest.fixture
def double():
    """Run the test body in double precision."""
    with precision("double"):
        yield np.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for number in sorted(REPORT):
            terminalreporter.write_line(REPORT[number])
