import numpy as np
import pytest

from fedlog import _backend


@pytest.fixture(params=_backend.available())
def backend(request):
    previous = _backend.use(request.param)
    yield request.param
    _backend.use(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record a one-line verdict; lines are printed after the test session."""

    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
