import pytest

# (criterion number, passed, detail) for the acceptance summary
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an acceptance outcome, then assert it."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((number, bool(passed), detail))
        assert passed, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
