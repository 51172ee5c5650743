"""Golden-vector conformance bundles for the key-reweighting kernel.

`generate_conformance_bundle` writes a directory of fixture cases, each an
input key tensor (NPY), a guidance config (JSON, explicit token range so no
layout is needed), and the expected reweighted output (NPY), plus a manifest.
`check_conformance_bundle` replays every case through apply_grag and compares
against the expected tensors; any other implementation of the same kernel can
consume the directory the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GragError
from .guidance import GragConfig, apply_grag
from .numerics import Tensor
from .tensor_io import BundleError, read_tensor, write_tensor

CONFORMANCE_SCHEMA_VERSION = 1
DEFAULT_TOLERANCE = 1e-4

# name, [B, S, H, D], dtype, bias_scale, delta_scale, (i_start, i_end)
_CASE_SPECS = [
    ("identity", (1, 16, 2, 8), np.float32, 1.0, 1.0, (8, 16)),
    ("reference_default", (1, 64, 4, 16), np.float32, 1.0, 1.05, (32, 64)),
    ("delta_up", (1, 24, 2, 8), np.float32, 1.0, 1.15, (10, 20)),
    ("bias_up", (1, 24, 2, 8), np.float32, 1.05, 1.0, (0, 12)),
    ("joint_up", (1, 32, 4, 8), np.float32, 1.05, 1.05, (16, 32)),
    ("delta_collapse", (1, 16, 2, 4), np.float32, 1.0, 0.0, (4, 12)),
    ("two_token_group", (1, 2, 1, 2), np.float32, 1.0, 2.0, (0, 2)),
    ("joint_up_f64", (1, 32, 2, 8), np.float64, 1.1, 1.2, (8, 24)),
]


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
            "schema_version": CONFORMANCE_SCHEMA_VERSION,
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


def _case_input(name: str, shape: tuple[int, ...], dtype, seed: int, index: int) -> Tensor:
    if name == "two_token_group":
        return Tensor(np.array([[[[1.0, 0.0]], [[0.0, 1.0]]]], dtype=dtype))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    return Tensor._wrap(rng.normal(size=shape).astype(dtype))


def generate_conformance_bundle(out_dir, seed: int = 42) -> Path:
    """Write the fixture bundle; expected outputs come from this package's own
    apply_grag, which is the reference the bundle certifies against."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for index, (name, shape, dtype, bias_scale, delta_scale, group) in enumerate(_CASE_SPECS):
        cfg = GragConfig(bias_scale=bias_scale, delta_scale=delta_scale, i_start=group[0], i_end=group[1])
        k_in = _case_input(name, shape, dtype, seed, index)
        k_out = apply_reference(k_in, cfg)
        input_file = f"{name}_input.npy"
        expected_file = f"{name}_expected.npy"
        config_file = f"{name}_config.json"
        write_tensor(root / input_file, k_in)
        write_tensor(root / expected_file, k_out)
        (root / config_file).write_text(
            json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        cases.append({"name": name, "input": input_file, "expected": expected_file, "config": config_file})
    manifest = {
        "schema_version": CONFORMANCE_SCHEMA_VERSION,
        "kind": "grag-conformance",
        "seed": seed,
        "default_tolerance": DEFAULT_TOLERANCE,
        "cases": cases,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def apply_reference(k: Tensor, cfg: GragConfig) -> Tensor:
    """The kernel under certification, by its library implementation."""
    return apply_grag(k, cfg)


def load_conformance_manifest(bundle_dir) -> dict:
    root = Path(bundle_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BundleError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"{manifest_path}: manifest is not valid JSON: {exc}") from None
    if manifest.get("schema_version") != CONFORMANCE_SCHEMA_VERSION:
        raise BundleError(f"{manifest_path}: unsupported schema_version {manifest.get('schema_version')!r}")
    if manifest.get("kind") != "grag-conformance":
        raise BundleError(f"{manifest_path}: not a conformance bundle (kind={manifest.get('kind')!r})")
    if not manifest.get("cases"):
        raise BundleError(f"{manifest_path}: bundle declares no cases")
    return manifest


def check_conformance_bundle(bundle_dir, tolerance: float = DEFAULT_TOLERANCE) -> ConformanceReport:
    """Replay every bundled case through apply_grag and compare to the stored
    expected output. Raises GragError subclasses for unreadable bundles."""
    root = Path(bundle_dir)
    manifest = load_conformance_manifest(root)
    results = []
    for case in manifest["cases"]:
        name = case["name"]
        try:
            k_in = read_tensor(root / case["input"])
            expected = read_tensor(root / case["expected"])
            cfg = GragConfig.from_json_file(root / case["config"])
        except (OSError, GragError) as exc:
            raise BundleError(f"case {name}: {exc}") from None
        actual = apply_reference(k_in, cfg)
        if actual.shape != expected.shape:
            raise BundleError(f"case {name}: expected shape {expected.shape}, got {actual.shape}")
        diff = float(np.max(np.abs(actual.array.astype(np.float64) - expected.array.astype(np.float64))))
        results.append(CaseResult(name=name, max_abs_diff=diff, passed=diff <= tolerance))
    return ConformanceReport(tolerance=tolerance, cases=tuple(results))
