import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []  # (number, passed, description), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, desc in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{num:2d}] {'PASS' if passed else 'FAIL'}  {desc}")
