import pytest

from acceptance_log import LINES


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(LINES):
        terminalreporter.write_line(LINES[n])
