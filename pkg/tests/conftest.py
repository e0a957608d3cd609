ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[f"{criterion:02d}"] = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
