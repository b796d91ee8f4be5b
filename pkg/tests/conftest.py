import pytest

# criterion lines recorded by test_acceptance, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
