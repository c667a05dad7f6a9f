import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Register the one-line outcome of an acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
