import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def verdict():
    def record(number, checks, detail=""):
        ok = all(checks.values())
        failed = [name for name, good in checks.items() if not good]
        line = detail + (f" | failed: {', '.join(failed)}" if failed else "")
        ACCEPTANCE[number] = (ok, line)
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {line}")
        assert ok, f"criterion {number} failed: {', '.join(failed)}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {line}")
