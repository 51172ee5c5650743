import json
import shutil

import numpy as np
import pytest

from grag_shim import run_conformance
from grag_shim.conformance import BundleReadError, main


def test_criterion_11_cross_implementation_conformance(reference_bundle):
    report = run_conformance(reference_bundle, tolerance=1e-4)
    assert report.passed
    assert len(report.cases) >= 8
    names = {c.name for c in report.cases}
    assert "reference_default" in names  # bias 1.0 / delta 1.05 configuration
    for case in report.cases:
        assert case.max_abs_diff <= 1e-4, f"{case.name} diverged by {case.max_abs_diff}"


def test_float64_case_much_tighter(reference_bundle):
    report = run_conformance(reference_bundle, tolerance=1e-8)
    by_name = {c.name: c for c in report.cases}
    assert by_name["joint_up_f64"].max_abs_diff <= 1e-8


def test_perturbed_expected_fails_and_names_case(reference_bundle, tmp_path):
    bundle = tmp_path / "bundle"
    shutil.copytree(reference_bundle, bundle)
    path = bundle / "joint_up_expected.npy"
    arr = np.load(path)
    arr[0, 20, 0, 0] += 1e-2
    np.save(path, arr)
    report = run_conformance(bundle, tolerance=1e-4)
    assert not report.passed
    failed = [c.name for c in report.cases if not c.passed]
    assert failed == ["joint_up"]


def test_empty_dir_is_unreadable(tmp_path):
    with pytest.raises(BundleReadError):
        run_conformance(tmp_path)


def test_cli_pass_and_report(reference_bundle, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    assert main([str(reference_bundle), "--report", str(report_path), "--report-csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert json.loads(report_path.read_text())["passed"] is True
    assert csv_path.read_text().splitlines()[0] == "name,max_abs_diff,passed"


def test_cli_exit_codes(reference_bundle, tmp_path, capsys):
    assert main([str(tmp_path / "missing")]) == 1

    bundle = tmp_path / "bundle"
    shutil.copytree(reference_bundle, bundle)
    path = bundle / "delta_up_expected.npy"
    arr = np.load(path)
    arr[0, 12, 1, 3] -= 5e-3
    np.save(path, arr)
    assert main([str(bundle)]) == 2
    assert "delta_up" in capsys.readouterr().out
