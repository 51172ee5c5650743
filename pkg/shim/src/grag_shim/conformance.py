"""Replay a reference conformance bundle through the torch patch and compare
against the bundled expected outputs.

Bundles are directories produced by the reference CLI's `conformance
--generate`: NPY input/expected tensors plus per-case JSON configs and a
manifest. Exit codes match the reference convention: 0 all cases pass, 1 the
bundle is unreadable, 2 at least one case exceeds tolerance.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .patch import ShimConfig, patch_keys

SCHEMA_VERSION = 1
DEFAULT_TOLERANCE = 1e-4


class BundleReadError(Exception):
    """The bundle directory or one of its files cannot be used."""


@dataclass(frozen=True)
class CaseResult:
    name: str
    max_abs_diff: float
    passed: bool


@dataclass(frozen=True)
class ConformanceReport:
    tolerance: float
    cases: tuple[CaseResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "cases": [
                {"name": c.name, "max_abs_diff": c.max_abs_diff, "passed": c.passed} for c in self.cases
            ],
        }

    def to_csv_text(self) -> str:
        lines = ["name,max_abs_diff,passed"]
        for c in self.cases:
            lines.append(f"{c.name},{repr(c.max_abs_diff)},{str(c.passed).lower()}")
        return "\n".join(lines) + "\n"


def _load_array(path: Path) -> np.ndarray:
    if not path.is_file():
        raise BundleReadError(f"{path}: file does not exist")
    try:
        arr = np.load(path)
    except ValueError as exc:
        raise BundleReadError(f"{path}: not a readable NPY file: {exc}") from None
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise BundleReadError(f"{path}: unsupported dtype {arr.dtype}")
    return arr


def run_conformance(bundle_dir, tolerance: float = DEFAULT_TOLERANCE) -> ConformanceReport:
    root = Path(bundle_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BundleReadError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleReadError(f"{manifest_path}: manifest is not valid JSON: {exc}") from None
    if manifest.get("kind") != "grag-conformance" or manifest.get("schema_version") != SCHEMA_VERSION:
        raise BundleReadError(f"{manifest_path}: not a supported conformance bundle")
    cases = manifest.get("cases") or []
    if not cases:
        raise BundleReadError(f"{manifest_path}: bundle declares no cases")

    results = []
    for case in cases:
        name = case.get("name", "<unnamed>")
        try:
            k_in = _load_array(root / case["input"])
            expected = _load_array(root / case["expected"])
            cfg = ShimConfig.from_json_file(root / case["config"])
        except (KeyError, OSError, ValueError) as exc:
            raise BundleReadError(f"case {name}: {exc}") from None
        actual = patch_keys(torch.from_numpy(k_in.copy()), cfg).numpy()
        if actual.shape != expected.shape:
            raise BundleReadError(f"case {name}: expected shape {expected.shape}, got {actual.shape}")
        diff = float(np.max(np.abs(actual.astype(np.float64) - expected.astype(np.float64))))
        results.append(CaseResult(name=name, max_abs_diff=diff, passed=diff <= tolerance))
    return ConformanceReport(tolerance=tolerance, cases=tuple(results))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="grag-shim", description="check the torch patch against a reference conformance bundle"
    )
    parser.add_argument("bundle", help="bundle directory from the reference `conformance --generate`")
    parser.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    parser.add_argument("--report", default=None, help="also write the report as JSON")
    parser.add_argument("--report-csv", default=None, help="also write the report as CSV")
    args = parser.parse_args(argv)
    try:
        report = run_conformance(args.bundle, tolerance=args.tol)
    except BundleReadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for case in report.cases:
        print(f"  {case.name:<24} max_abs_diff={case.max_abs_diff:.3e} [{'PASS' if case.passed else 'FAIL'}]")
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if args.report_csv:
        Path(args.report_csv).write_text(report.to_csv_text(), encoding="utf-8", newline="")
    print(f"conformance: {'PASS' if report.passed else 'FAIL'} (tol={report.tolerance})")
    return 0 if report.passed else 2


if __name__ == "__main__":
    sys.exit(main())
