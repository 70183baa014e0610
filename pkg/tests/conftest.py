"""Shared pytest plumbing: the acceptance-criteria summary block.

Acceptance tests record one line each via the `criterion_report` fixture;
the lines are echoed in a dedicated section after the test run so the
pass/fail status of every criterion is visible in plain terminal output.
"""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    def _record(line: str) -> None:
        _ACCEPTANCE_LINES.append(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
