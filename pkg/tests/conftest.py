"""Shared test plumbing: a registry of acceptance-check result lines that is
echoed in the terminal summary so every criterion shows one pass/fail line."""

ACCEPTANCE_LINES: list = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
