"""Shared pytest wiring: collect acceptance one-liners for the run summary."""

ACCEPTANCE_LINES = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    """Print and remember one acceptance line; returns ``ok`` for asserting."""
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
