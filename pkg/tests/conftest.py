import pytest

from schedtree import simcore

# Every simulation in the suite re-checks node accounting at every event
# and the interval-sweep peak at the end of the run.
simcore.CHECK_INVARIANTS = True

# criterion number -> (passed, detail), filled in by test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        prev = CRITERIA.get(number)
        # a criterion asserted in several tests passes only if all parts do
        if prev is not None:
            passed = passed and prev[0]
            detail = f"{prev[1]}; {detail}"
        CRITERIA[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
