import pytest

from _helpers import ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def numpy_backend(monkeypatch):
    from casa import _accel

    monkeypatch.setattr(_accel, "USE_NUMBA", False)
