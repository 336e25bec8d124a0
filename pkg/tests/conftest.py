"""Collects acceptance verdicts and prints them as one block at the end of the run."""

from __future__ import annotations

VERDICTS: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
