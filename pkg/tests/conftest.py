import pytest

# (criterion number, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} | {title} | {detail}"
    ACCEPTANCE.append(line)
    print(line)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
        terminalreporter.write_line(line)
