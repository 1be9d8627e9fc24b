"""Shared pytest configuration: acceptance-criterion result reporting.

Acceptance tests record one verdict per criterion via `record_criterion`;
the terminal-summary hook prints one pass/fail line each, visible even
under output capture.
"""

_criterion_results = []


def record_criterion(number: int, ok: bool, description: str) -> bool:
    """Store and immediately print a criterion verdict; returns ok so tests
    can write `assert record_criterion(...)`."""
    _criterion_results.append((number, bool(ok), description))
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {description}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, description in sorted(_criterion_results):
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if ok else 'FAIL'} - {description}")
