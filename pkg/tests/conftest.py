ACCEPTANCE_LINES = {}


def record(criterion, passed, detail):
    """Remember one acceptance outcome; printed in the terminal summary."""
    status = "PASS" if passed is True else ("SKIP" if passed is None else "FAIL")
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {status}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
