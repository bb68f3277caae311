import pytest

# acceptance verdicts, echoed in the terminal summary so they survive output capture
VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, label, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {label}" + (f" ({detail})" if detail else "")
        VERDICTS.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS, key=lambda v: str(v[0])):
            terminalreporter.write_line(line)
