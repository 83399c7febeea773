import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def verdict():
    """Record, print and assert one criterion's outcome."""

    def record(n: int, title: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return record
