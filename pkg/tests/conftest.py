"""Collects the one-line acceptance verdicts and prints them at the end of the run."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
