import pytest

# One line per acceptance criterion, replayed at the end of the run so the
# verdicts stay visible even when every test passes.
_CRITERION_LINES: list = []


@pytest.fixture(scope="session")
def criterion_log():
    return _CRITERION_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)
