import sys
from pathlib import Path

# test modules share small helpers (the tiny experiment config, the verdict log)
sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
