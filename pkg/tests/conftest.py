"""Shared pytest plumbing: a one-line-per-criterion acceptance summary."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print a pass/fail line, then fail the test if it did not pass."""

    def record(criterion: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {criterion} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
