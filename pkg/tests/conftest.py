"""Collects one pass/fail line per acceptance criterion and prints them at
the end of the session."""

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict:4s}  {detail}")
