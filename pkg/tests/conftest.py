"""Collects acceptance verdicts and prints them at the end of the session."""

VERDICTS = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    VERDICTS.append((criterion, passed, detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in VERDICTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
