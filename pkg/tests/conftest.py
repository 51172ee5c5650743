import re
import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile(
    "suite", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, printed after the run."""
    results = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call":
                continue
            m = _CRITERION.search(getattr(report, "nodeid", ""))
            if m:
                status = "PASS" if outcome == "passed" else "FAIL"
                results[int(m.group(1))] = (status, m.group(2))
    if results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(results):
            status, name = results[num]
            terminalreporter.write_line(f"criterion {num:>2} [{status}] {name}")
