CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
