import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary so
    it survives pytest's output capture."""

    def record(number: int, title: str, ok: bool, detail: str, soft: bool = False) -> bool:
        status = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
        line = f"[{status}] {number:02d} {title}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: s.split("]", 1)[1]):
            terminalreporter.write_line(line)
