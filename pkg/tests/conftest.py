import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one summary line; all lines are repeated at the end of the run."""

    def emit(line):
        print(line)
        _LINES.append(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
