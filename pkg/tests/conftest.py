import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_verdicts = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line: verdict(number, passed, detail)."""
    def record(number, passed, detail):
        _verdicts[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_verdicts[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_verdicts):
            terminalreporter.write_line(_verdicts[number])
