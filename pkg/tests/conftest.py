import pytest

_LINES = []


@pytest.fixture
def acceptance_log():
    """Collect one verdict line per acceptance criterion for the terminal summary."""
    def log(line):
        print(line)
        _LINES.append(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
