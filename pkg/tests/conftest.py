import warnings

import pytest

# filled by tests/test_acceptance.py: one (label, passed, detail) per criterion
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _quiet_scene_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*could not place.*")
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
