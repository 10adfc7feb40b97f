"""Shared pytest plumbing: the acceptance-criteria summary block.

test_acceptance.py records one line per release criterion; printing them in
the terminal summary keeps them visible even when every test passes (pytest
swallows stdout of passing tests).
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
