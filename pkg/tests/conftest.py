import util


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines where they survive capture."""
    if util.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(util.ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
