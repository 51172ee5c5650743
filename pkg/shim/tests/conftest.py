import os
import re
import subprocess
import sys
from pathlib import Path

import pytest

SHIM_ROOT = Path(__file__).resolve().parent.parent
REFERENCE_SRC = SHIM_ROOT.parent / "src"

sys.path.insert(0, str(SHIM_ROOT / "src"))


def generate_reference_bundle(out_dir: Path) -> Path:
    """Produce a golden bundle through the reference implementation's CLI,
    the only interface the shim is allowed to depend on."""
    env = dict(os.environ)
    env["PYTHONPATH"] = str(REFERENCE_SRC) + os.pathsep + env.get("PYTHONPATH", "")
    subprocess.run(
        [sys.executable, "-m", "grag", "conformance", "--generate", str(out_dir)],
        check=True,
        env=env,
        capture_output=True,
    )
    return out_dir


@pytest.fixture(scope="session")
def reference_bundle(tmp_path_factory) -> Path:
    return generate_reference_bundle(tmp_path_factory.mktemp("reference") / "bundle")


_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
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
