import pytest

REPORT: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Collect one PASS/FAIL line per acceptance criterion."""

    def add(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        REPORT.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
