import pytest

# (criterion number, title, passed, detail), filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")


@pytest.fixture
def record_acceptance():
    def record(num, title, passed, detail):
        ACCEPTANCE_RESULTS.append((num, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")
        return passed

    return record
