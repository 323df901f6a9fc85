import sys
from pathlib import Path

import pytest

# helper modules (oracles, gradchecks) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the session summary."""

    def record(number, ok, detail):
        _CRITERIA.setdefault(number, []).append((ok, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        ok = all(r[0] for r in results)
        details = "; ".join(r[1] for r in results)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {details}")
