"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS = {}


def record(number: int, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[number])


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
