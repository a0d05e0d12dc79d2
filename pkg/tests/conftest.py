import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion.

    The line is also printed immediately (visible with ``-s``) and repeated
    in the terminal summary so it survives output capture.
    """
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
