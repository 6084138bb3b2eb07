"""Shared pytest plumbing: an end-of-run acceptance summary.

Tests append human-readable measurement lines through the `report` fixture;
the lines are printed in the terminal summary so a plain `pytest -v` run
doubles as a short acceptance report.
"""

import pytest

_LINES = []


@pytest.fixture(scope="session")
def report():
    return _LINES.append


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for line in _LINES:
        terminalreporter.write_line(line)
