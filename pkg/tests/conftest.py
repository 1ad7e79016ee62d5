import pytest

# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
