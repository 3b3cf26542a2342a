CRITERIA = []  # (number, title, passed, detail) recorded by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(CRITERIA, key=lambda r: r[0]):
        status = "PASS" if passed else ("INFO" if passed is None else "FAIL")
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
