import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it.

    With ``known_gap`` set, a failure is reported as an expected failure
    (the README explains the gap) instead of an error.
    """
    def record(number: int, title: str, ok: bool, detail: str = "", known_gap: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        if not ok and known_gap:
            line += f"  (known gap: {known_gap})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if not ok and known_gap:
            pytest.xfail(known_gap)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
