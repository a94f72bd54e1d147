import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for the acceptance summary, then assert it."""
    def check(name, ok, detail):
        _CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
