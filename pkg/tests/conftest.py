from __future__ import annotations

import pytest

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
