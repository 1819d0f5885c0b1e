import pytest

_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record one pass/fail line per criterion and fail the test if it did not pass."""

    def report(number, name, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n  {line}")
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
