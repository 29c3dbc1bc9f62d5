import sys
from pathlib import Path

# test modules share random-instance helpers
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.LINES):
        terminalreporter.write_line(acceptance.LINES[number])
