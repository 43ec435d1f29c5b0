import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", rep.nodeid.split("::")[-1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, verdict, name in sorted(lines):
            terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {name}")
