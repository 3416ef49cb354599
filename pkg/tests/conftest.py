"""Collects the acceptance verdict lines and prints them in the terminal summary."""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def criterion():
    """``criterion(n, text, ok)`` records one PASS/FAIL line, prints it and asserts it."""

    def check(number: int, text: str, ok: bool) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
