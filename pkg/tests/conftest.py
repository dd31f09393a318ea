import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []


def record_verdict(criterion: int, passed: bool, detail: str, soft: bool = False) -> str:
    tag = "PASS" if passed else ("WARN" if soft else "FAIL")
    line = f"criterion {criterion:>2}: {tag}  {detail}"
    VERDICTS.append((criterion, line))
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
