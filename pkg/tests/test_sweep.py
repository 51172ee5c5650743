import json
from pathlib import Path

import numpy as np
import pytest

from grag.attention import SegmentLayout
from grag.errors import ConfigError, ShapeError
from grag.model import ToyModelConfig, build_toy_model, seeded_inputs
from grag.numerics import Tensor
from grag.sweep import (
    DEFAULT_CFG_GRID,
    DEFAULT_SCALE_GRID,
    SweepMode,
    SweepSpec,
    segment_attention_mass,
    sweep,
    sweep_config_from_json,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "sweep_golden.json").read_text())

TINY = ToyModelConfig(layers=2, n_text=2, n_img=3, d_text=4, d_img=6, heads=2, head_dim=4, seed=42)


def tiny_fixture():
    return build_toy_model(TINY), seeded_inputs(TINY)


class TestSegmentAttentionMass:
    def test_uniform_row_counts_segments(self):
        layout = SegmentLayout(2, 3)
        row = np.full(8, 1.0 / 8.0)
        assert segment_attention_mass(row, layout) == pytest.approx((0.25, 0.375, 0.375))

    def test_one_hot_text_token(self):
        layout = SegmentLayout(2, 3)
        row = np.zeros(8)
        row[1] = 1.0
        assert segment_attention_mass(row, layout) == (1.0, 0.0, 0.0)

    def test_masses_sum_to_one(self):
        layout = SegmentLayout(3, 4)
        rng = np.random.Generator(np.random.PCG64(1))
        logits = rng.normal(size=(2, 5, 11))
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        mt, me, ms = segment_attention_mass(Tensor(probs), layout)
        np.testing.assert_allclose(mt + me + ms, 1.0, atol=1e-6)

    def test_layout_mismatch(self):
        with pytest.raises(ShapeError):
            segment_attention_mass(np.zeros(7), SegmentLayout(2, 3))


class TestSweepSpec:
    def test_defaults_mirror_ablation_grids(self):
        spec = SweepSpec()
        assert spec.bias_scales == DEFAULT_SCALE_GRID == (0.95, 1.0, 1.05, 1.1, 1.15)
        assert spec.cfg_scales == DEFAULT_CFG_GRID == (1.0, 2.0, 3.0, 4.0, 5.0)

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            SweepSpec(delta_scales=())

    def test_joint_requires_matching_lengths(self):
        with pytest.raises(ConfigError):
            SweepSpec(mode=SweepMode.JOINT, bias_scales=(1.0,), delta_scales=(1.0, 1.1))

    def test_non_positive_scales_rejected(self):
        with pytest.raises(ConfigError):
            SweepSpec(bias_scales=(0.0, 1.0))

    def test_json_round_trip(self):
        spec = SweepSpec(mode=SweepMode.JOINT, i_start=2, i_end=5, target_layers=frozenset({1}))
        assert SweepSpec.from_json_dict(spec.to_json_dict()) == spec


class TestSweep:
    def test_identity_grid_single_zero_row(self):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=(1.0,)))
        assert len(report.rows) == 1
        row = report.rows[0]
        assert row.divergence == 0.0
        assert row.cosine_to_baseline == 1.0

    def test_rows_sorted_by_grid(self):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=(1.1, 0.95, 1.0)))
        assert [r.delta_scale for r in report.rows] == [0.95, 1.0, 1.1]

    def test_masses_sum_to_one_per_row(self):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=(1.0, 1.1)))
        for r in report.rows:
            assert r.mass_text + r.mass_edit + r.mass_source == pytest.approx(1.0, abs=1e-6)

    def test_cfg_mode_reference_row_exact(self):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.CFG_ONLY, cfg_scales=(1.0, 2.0, 4.0)))
        by_scale = {r.cfg_scale: r for r in report.rows}
        assert by_scale[1.0].divergence == 0.0
        assert by_scale[2.0].divergence > 0.0
        assert by_scale[4.0].divergence > by_scale[2.0].divergence

    def test_lambda_mode_holds_delta_at_one(self):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.LAMBDA_ONLY, bias_scales=(0.95, 1.0)))
        assert all(r.delta_scale == 1.0 for r in report.rows)

    def test_serialization_deterministic(self, tmp_path):
        model, inputs = tiny_fixture()
        spec = SweepSpec(mode=SweepMode.JOINT, bias_scales=(1.0, 1.05), delta_scales=(1.0, 1.05))
        a = sweep(model, inputs, spec)
        b = sweep(model, inputs, spec)
        a.write(tmp_path / "a")
        b.write(tmp_path / "b")
        assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_csv_omits_wall_time(self, tmp_path):
        model, inputs = tiny_fixture()
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=(1.0,)))
        csv_path, json_path = report.write(tmp_path)
        assert "wall" not in csv_path.read_text()
        assert "wall" not in json_path.read_text()


@pytest.fixture(scope="module")
def fixture_model():
    cfg = ToyModelConfig.from_json_dict(GOLDEN["model"])
    return build_toy_model(cfg), seeded_inputs(cfg)


class TestGoldenOrdering:
    """Regression against the recorded seed-42 reference run."""

    def test_delta_block_matches_golden(self, fixture_model):
        model, inputs = fixture_model
        golden = GOLDEN["delta_only"]
        grid = tuple(p["delta_scale"] for p in golden["points"])
        report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=grid))
        divs = [r.divergence for r in report.rows]
        assert divs[0] == 0.0
        assert all(a < b for a, b in zip(divs, divs[1:]))
        ordering = sorted(range(len(divs)), key=lambda i: divs[i])
        assert ordering == golden["divergence_ordering"]

    def test_joint_block_matches_golden(self, fixture_model):
        model, inputs = fixture_model
        golden = GOLDEN["joint"]
        report = sweep(
            model,
            inputs,
            SweepSpec(
                mode=SweepMode.JOINT,
                bias_scales=tuple(p["bias_scale"] for p in golden["points"]),
                delta_scales=tuple(p["delta_scale"] for p in golden["points"]),
            ),
        )
        divs = [r.divergence for r in report.rows]
        ordering = sorted(range(len(divs)), key=lambda i: divs[i])
        assert ordering == golden["divergence_ordering"]


class TestSweepConfigLoader:
    def test_packaged_default_loads(self):
        from grag.cli import default_sweep_config

        model_cfg, spec, meta = sweep_config_from_json(default_sweep_config())
        assert meta == {"seed": 42, "batch_size": 1, "inference_steps": 24}
        assert spec.mode is SweepMode.DELTA_ONLY
        assert spec.delta_scales == (0.95, 1.0, 1.05, 1.1, 1.15)
        assert model_cfg.layers == 4

    def test_schema_version_enforced(self):
        with pytest.raises(ConfigError):
            sweep_config_from_json({"schema_version": 2})
