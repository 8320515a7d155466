import numpy as np
import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion("A1", passed, "detail")``."""
    def record(cid, passed, detail=""):
        ACCEPTANCE[cid] = (bool(passed), detail)
        print(f"{cid} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'}  {detail}")
