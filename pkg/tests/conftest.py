import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """``criterion(label, ok, detail)`` prints one PASS/FAIL line and returns ``ok``."""

    def report(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
