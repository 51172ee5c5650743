"""Guidance-scale sweeps over the toy model.

A sweep evaluates a grid of guidance settings against the identity baseline
(bias_scale = delta_scale = 1, or guidance scale 1 for the classifier-free
mode) and reports, per grid point, the relative L2 divergence of the final
edit-segment representation, its cosine similarity to the baseline, and the
average attention mass each segment receives from edit queries.

Four modes mirror the usual ablation blocks: lambda_only varies the bias
scale, delta_only the delta scale, joint moves both together (zipped pairs),
and cfg_only sweeps the classifier-free combination scale, using a pass with
zeroed text keys as the unconditional branch (a desk-scale analog, not a
claim of equivalence to sampler-level guidance).

Reports serialize to CSV and JSON deterministically: same seed and config,
byte-identical files. Wall-clock timings are kept in memory only so they
never perturb the serialized outputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .attention import SegmentLayout
from .errors import ConfigError, ShapeError
from .guidance import GragConfig, GroupSelector
from .model import EditInputs, ToyModel, ToyModelConfig, cfg_combine, run_edit_pass
from .numerics import Tensor

REPORT_SCHEMA_VERSION = 1

# Default grids follow the standard ablation blocks: five guidance scales
# around 1 and integer classifier-free scales 1..5.
DEFAULT_SCALE_GRID = (0.95, 1.0, 1.05, 1.1, 1.15)
DEFAULT_CFG_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)


class SweepMode(str, Enum):
    LAMBDA_ONLY = "lambda_only"
    DELTA_ONLY = "delta_only"
    JOINT = "joint"
    CFG_ONLY = "cfg_only"


@dataclass(frozen=True)
class SweepSpec:
    mode: SweepMode = SweepMode.DELTA_ONLY
    bias_scales: tuple[float, ...] = DEFAULT_SCALE_GRID
    delta_scales: tuple[float, ...] = DEFAULT_SCALE_GRID
    cfg_scales: tuple[float, ...] = DEFAULT_CFG_GRID
    group_selector: GroupSelector = GroupSelector.SOURCE_TOKENS
    i_start: int | None = None
    i_end: int | None = None
    target_layers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "mode", SweepMode(self.mode))
        object.__setattr__(self, "group_selector", GroupSelector(self.group_selector))
        object.__setattr__(self, "bias_scales", tuple(float(x) for x in self.bias_scales))
        object.__setattr__(self, "delta_scales", tuple(float(x) for x in self.delta_scales))
        object.__setattr__(self, "cfg_scales", tuple(float(x) for x in self.cfg_scales))
        object.__setattr__(self, "target_layers", frozenset(int(i) for i in self.target_layers))
        for name in ("bias_scales", "delta_scales", "cfg_scales"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        if any(x <= 0 for x in self.bias_scales) or any(x < 0 for x in self.delta_scales):
            raise ConfigError("bias scales must be > 0 and delta scales >= 0")
        if any(x < 0 for x in self.cfg_scales):
            raise ConfigError("cfg scales must be >= 0")
        if self.mode is SweepMode.JOINT and len(self.bias_scales) != len(self.delta_scales):
            raise ConfigError("joint mode pairs the grids; bias_scales and delta_scales need equal length")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "bias_scales": list(self.bias_scales),
            "delta_scales": list(self.delta_scales),
            "cfg_scales": list(self.cfg_scales),
            "group_selector": self.group_selector.value,
            "i_start": self.i_start,
            "i_end": self.i_end,
            "target_layers": sorted(self.target_layers),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SweepSpec":
        return cls(
            mode=SweepMode(obj.get("mode", "delta_only")),
            bias_scales=tuple(obj.get("bias_scales", DEFAULT_SCALE_GRID)),
            delta_scales=tuple(obj.get("delta_scales", DEFAULT_SCALE_GRID)),
            cfg_scales=tuple(obj.get("cfg_scales", DEFAULT_CFG_GRID)),
            group_selector=GroupSelector(obj.get("group_selector", "source_tokens")),
            i_start=None if obj.get("i_start") is None else int(obj["i_start"]),
            i_end=None if obj.get("i_end") is None else int(obj["i_end"]),
            target_layers=frozenset(obj.get("target_layers", [])),
        )


@dataclass(frozen=True)
class SweepRow:
    bias_scale: float | None
    delta_scale: float | None
    cfg_scale: float | None
    divergence: float
    cosine_to_baseline: float
    mass_text: float
    mass_edit: float
    mass_source: float
    wall_time_s: float  # in-memory only; never serialized


@dataclass(frozen=True)
class SweepReport:
    mode: SweepMode
    spec: SweepSpec
    model: ToyModelConfig
    rows: tuple[SweepRow, ...]

    CSV_HEADER = "mode,bias_scale,delta_scale,cfg_scale,divergence,cosine_to_baseline,mass_text,mass_edit,mass_source"

    def to_csv_text(self) -> str:
        def cell(x: float | None) -> str:
            return "" if x is None else repr(float(x))

        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        self.mode.value,
                        cell(r.bias_scale),
                        cell(r.delta_scale),
                        cell(r.cfg_scale),
                        cell(r.divergence),
                        cell(r.cosine_to_baseline),
                        cell(r.mass_text),
                        cell(r.mass_edit),
                        cell(r.mass_source),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode.value,
            "model": self.model.to_json_dict(),
            "sweep": self.spec.to_json_dict(),
            "rows": [
                {
                    "bias_scale": r.bias_scale,
                    "delta_scale": r.delta_scale,
                    "cfg_scale": r.cfg_scale,
                    "divergence": r.divergence,
                    "cosine_to_baseline": r.cosine_to_baseline,
                    "mass_text": r.mass_text,
                    "mass_edit": r.mass_edit,
                    "mass_source": r.mass_source,
                }
                for r in self.rows
            ],
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "report.csv"
        json_path = out / "report.json"
        csv_path.write_text(self.to_csv_text(), encoding="utf-8", newline="")
        json_path.write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8", newline=""
        )
        return csv_path, json_path

    @property
    def total_wall_time_s(self) -> float:
        return sum(r.wall_time_s for r in self.rows)


def segment_attention_mass(probs, layout: SegmentLayout):
    """Sum an attention probability row (or any array whose last axis runs
    over the joint sequence) into its text/edit/source masses."""
    arr = probs.array if isinstance(probs, Tensor) else np.asarray(probs)
    if arr.shape[-1] != layout.total:
        raise ShapeError(f"last axis {arr.shape[-1]} != layout total {layout.total}")
    t0, t1 = layout.text_range
    e0, e1 = layout.edit_range
    s0, s1 = layout.source_range
    mass = (
        arr[..., t0:t1].sum(axis=-1),
        arr[..., e0:e1].sum(axis=-1),
        arr[..., s0:s1].sum(axis=-1),
    )
    if arr.ndim == 1:
        return tuple(float(m) for m in mass)
    return mass


def _mean_masses(probes, layout: SegmentLayout) -> tuple[float, float, float]:
    # Average each segment's mass over layers, batch, edit queries, and heads.
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for p in probes:
        mt, me, ms = segment_attention_mass(p, layout)
        totals += [mt.mean(), me.mean(), ms.mean()]
        count += 1
    totals /= max(count, 1)
    return float(totals[0]), float(totals[1]), float(totals[2])


def _divergence_and_cosine(out: Tensor, baseline: Tensor) -> tuple[float, float]:
    a = out.array.astype(np.float64).reshape(-1)
    b = baseline.array.astype(np.float64).reshape(-1)
    if np.array_equal(a, b):
        return 0.0, 1.0
    base_norm = float(np.linalg.norm(b))
    div = float(np.linalg.norm(a - b)) / base_norm
    cos = float(a @ b) / (float(np.linalg.norm(a)) * base_norm)
    return div, cos


def sweep(model: ToyModel, inputs: EditInputs, spec: SweepSpec) -> SweepReport:
    """Evaluate every grid point of the spec against the identity baseline.
    Deterministic for a fixed model seed and spec; rows come out sorted by
    grid coordinate."""
    layout = model.layout
    baseline, baseline_probes = run_edit_pass(model, inputs, None, return_probes=True)
    baseline_masses = _mean_masses(baseline_probes, layout)

    rows: list[SweepRow] = []
    if spec.mode is SweepMode.CFG_ONLY:
        start = time.perf_counter()
        uncond = run_edit_pass(model, inputs, None, zero_text_keys=True)
        uncond_time = time.perf_counter() - start
        for s in sorted(spec.cfg_scales):
            t0 = time.perf_counter()
            combined = cfg_combine(uncond, baseline, s)
            div, cos = _divergence_and_cosine(combined, baseline)
            rows.append(
                SweepRow(
                    bias_scale=None,
                    delta_scale=None,
                    cfg_scale=s,
                    divergence=div,
                    cosine_to_baseline=cos,
                    mass_text=baseline_masses[0],
                    mass_edit=baseline_masses[1],
                    mass_source=baseline_masses[2],
                    wall_time_s=(time.perf_counter() - t0) + uncond_time / len(spec.cfg_scales),
                )
            )
    else:
        if spec.mode is SweepMode.LAMBDA_ONLY:
            points = [(b, 1.0) for b in sorted(spec.bias_scales)]
        elif spec.mode is SweepMode.DELTA_ONLY:
            points = [(1.0, d) for d in sorted(spec.delta_scales)]
        else:
            points = sorted(zip(spec.bias_scales, spec.delta_scales))
        for bias_scale, delta_scale in points:
            cfg = GragConfig(
                bias_scale=bias_scale,
                delta_scale=delta_scale,
                i_start=spec.i_start,
                i_end=spec.i_end,
                group_selector=spec.group_selector,
                target_layers=spec.target_layers,
            )
            t0 = time.perf_counter()
            out, probes = run_edit_pass(model, inputs, cfg, return_probes=True)
            elapsed = time.perf_counter() - t0
            div, cos = _divergence_and_cosine(out, baseline)
            mt, me, ms = _mean_masses(probes, layout)
            rows.append(
                SweepRow(
                    bias_scale=bias_scale,
                    delta_scale=delta_scale,
                    cfg_scale=None,
                    divergence=div,
                    cosine_to_baseline=cos,
                    mass_text=mt,
                    mass_edit=me,
                    mass_source=ms,
                    wall_time_s=elapsed,
                )
            )
    return SweepReport(mode=spec.mode, spec=spec, model=model.config, rows=tuple(rows))


def sweep_config_from_json(obj: dict) -> tuple[ToyModelConfig, SweepSpec, dict]:
    """Split a sweep config file into model config, sweep spec, and the
    recorded protocol metadata (seed, batch size, step count)."""
    version = obj.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ConfigError(f"unsupported sweep config schema_version {version!r}")
    model_cfg = ToyModelConfig.from_json_dict(obj.get("model", {}))
    spec = SweepSpec.from_json_dict(obj.get("sweep", {}))
    meta = {
        "seed": int(obj.get("seed", model_cfg.seed)),
        "batch_size": int(obj.get("batch_size", 1)),
        "inference_steps": int(obj.get("inference_steps", 24)),
    }
    return model_cfg, spec, meta
