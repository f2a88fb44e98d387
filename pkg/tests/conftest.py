"""Shared pytest plumbing: acceptance-summary reporting.

Acceptance tests register one line each via record_acceptance(); the lines
are printed in a dedicated section after the run so they are visible even
when stdout capture is on.
"""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: int, ok: bool, detail: str) -> str:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
