import re

import pytest

# criterion id -> (passed, detail); filled by tests in test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record the verdict for the criterion named by the test (test_a6_... -> A6)."""
    cid = "A" + re.match(r"test_a(\d+)_", request.node.name).group(1)
    ACCEPTANCE.pop(cid, None)

    def record(passed, detail=""):
        ACCEPTANCE[cid] = (bool(passed), detail)
        return passed

    yield record
    if cid not in ACCEPTANCE:
        ACCEPTANCE[cid] = (False, "did not finish")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'}  {detail}")
