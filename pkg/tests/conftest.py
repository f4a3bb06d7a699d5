import acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(acceptance_report.LINES)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance")
    for index, name, passed, detail in lines:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status} {index}. {name}: {detail}")
