import re

import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance result: ``criterion(label, title, passed, detail)``.

    ``passed=None`` marks a criterion that was not run.
    """

    def record(label, title, passed, detail=""):
        _ACCEPTANCE[str(label)] = (title, passed, detail)
        return passed

    return record


def _order(label):
    m = re.match(r"(\d+)(.*)", label)
    return (int(m.group(1)), m.group(2)) if m else (10 ** 6, label)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=_order):
        title, passed, detail = _ACCEPTANCE[label]
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"[{status}] {label:<7} {title}: {detail}")
