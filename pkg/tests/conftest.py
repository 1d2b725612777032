# acceptance lines, echoed in the terminal summary so they survive output capture
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
