from pathlib import Path

RESULTS_FILE = Path(__file__).resolve().parent.parent / "acceptance_results.txt"


def pytest_terminal_summary(terminalreporter):
    if not RESULTS_FILE.is_file():
        return
    lines = RESULTS_FILE.read_text().splitlines()
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
