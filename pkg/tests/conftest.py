import pytest

# acceptance verdicts, filled in by tests/test_acceptance.py
VERDICTS: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
