"""Acceptance gate: one test per criterion, each at its stated tolerance and
runtime bound. The conftest terminal-summary hook prints a pass/fail line per
criterion after the run."""

import json
import math
import time

import numpy as np

import oracles
from grag.analysis import cross_run_similarity, decompose_bias, norm_map, softmax_via_decomposition
from grag.attention import RopeConfig, SegmentLayout, apply_rope, edit_attention_probs, joint_attention, token_positions
from grag.cli import main
from grag.guidance import GragConfig, GroupSelector, apply_grag, grag_attention
from grag.model import ToyModelConfig, build_toy_model, seeded_inputs
from grag.numerics import Tensor
from grag.sweep import SweepMode, SweepSpec, sweep
from grag.tensor_io import HeaderError, PayloadError, read_tensor, write_tensor


def rand(shape, seed, dtype=np.float32):
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.normal(size=shape).astype(dtype))


def test_criterion_01_grag_identity():
    start = time.perf_counter()
    k = rand((1, 64, 4, 32), 1)
    cfg = GragConfig(bias_scale=1.0, delta_scale=1.0, i_start=16, i_end=48)
    out = apply_grag(k, cfg)
    assert out is k or np.array_equal(out.array, k.array)

    layout = SegmentLayout(16, 24)  # total 64
    rope = RopeConfig(head_dim=32)
    q = rand((1, 64, 4, 32), 2)
    v = rand((1, 64, 4, 32), 3)
    guided = grag_attention(q, k, v, layout, rope, cfg)
    positions = token_positions(layout)
    unguided = joint_attention(apply_rope(q, positions, rope), apply_rope(k, positions, rope), v, layout)
    assert np.abs(guided.array - unguided.array).max() == 0.0
    assert time.perf_counter() - start < 1.0


def test_criterion_02_composition_law():
    start = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(20))
    for _ in range(1000):
        k = Tensor._wrap(rng.normal(size=(1, 8, 2, 4)).astype(np.float32))
        b1, b2 = rng.uniform(0.5, 1.5, size=2)
        d1, d2 = rng.uniform(0.0, 1.5, size=2)
        chained = apply_grag(
            apply_grag(k, GragConfig(bias_scale=b1, delta_scale=d1, i_start=2, i_end=7)),
            GragConfig(bias_scale=b2, delta_scale=d2, i_start=2, i_end=7),
        )
        combined = apply_grag(k, GragConfig(bias_scale=b1 * b2, delta_scale=d1 * d2, i_start=2, i_end=7))
        assert np.abs(chained.array - combined.array).max() <= 1e-6
    assert time.perf_counter() - start < 5.0


def test_criterion_03_factored_softmax_identity():
    rng = np.random.Generator(np.random.PCG64(30))
    for i in range(100):
        n_text = int(rng.integers(1, 9))
        n_img = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9)) * 2
        layout = SegmentLayout(n_text, n_img)
        dtype, tol = (np.float64, 1e-6) if i % 2 == 0 else (np.float32, 1e-5)
        keys = Tensor(rng.normal(size=(1, layout.total, 1, d)).astype(dtype))
        q = rng.normal(size=(d,)).astype(dtype)
        t0, t1 = layout.text_range
        e0, e1 = layout.edit_range
        s0, s1 = layout.source_range
        decs = [
            decompose_bias(Tensor(keys.array[0, a:b].copy()))
            for a, b in ((t0, t1), (e0, e1), (s0, s1))
        ]
        probs, _ = softmax_via_decomposition(q, decs[0], decs[1], decs[2], layout)
        direct = oracles.edit_probs_single(
            q.astype(np.float64).tolist(),
            [keys.array[0, j, 0].astype(np.float64).tolist() for j in range(layout.total)],
            1.0 / math.sqrt(d),
        )
        assert np.abs(probs - np.array(direct)).max() <= tol


def test_criterion_04_delta_zero_collapse():
    rng = np.random.Generator(np.random.PCG64(40))
    for seed in range(5):
        layout = SegmentLayout(int(rng.integers(2, 6)), int(rng.integers(2, 8)))
        rope = RopeConfig(head_dim=8)
        q = rand((1, layout.total, 2, 8), 100 + seed)
        k = rand((1, layout.total, 2, 8), 200 + seed)
        cfg = GragConfig(bias_scale=1.0, delta_scale=0.0, group_selector=GroupSelector.SOURCE_TOKENS)
        positions = token_positions(layout)
        q_rot = apply_rope(q, positions, rope)
        k_hat = apply_grag(apply_rope(k, positions, rope), cfg, layout)
        e0, e1 = layout.edit_range
        probs = edit_attention_probs(Tensor(q_rot.array[:, e0:e1].copy()), k_hat, layout)
        s0, s1 = layout.source_range
        intra_group = probs.array[..., s0:s1].astype(np.float64)
        assert intra_group.var(axis=-1).max() <= 1e-10


def test_criterion_05_rope_properties():
    cfg = RopeConfig(head_dim=32)
    rng = np.random.Generator(np.random.PCG64(50))
    for _ in range(100):
        q = Tensor._wrap(rng.normal(size=(1, 1, 1, 32)).astype(np.float32))
        k = Tensor._wrap(rng.normal(size=(1, 1, 1, 32)).astype(np.float32))
        m, n = (int(x) for x in rng.integers(0, 2048, size=2))
        t = int(rng.integers(-512, 512))

        q_rot = apply_rope(q, [m], cfg)
        pairs_in = q.array.reshape(-1, 2)
        pairs_out = q_rot.array.reshape(-1, 2)
        assert np.abs(np.linalg.norm(pairs_out, axis=1) - np.linalg.norm(pairs_in, axis=1)).max() <= 1e-6

        lhs = float(np.dot(q_rot.data, apply_rope(k, [n], cfg).data))
        rhs = float(np.dot(apply_rope(q, [m + t], cfg).data, apply_rope(k, [n + t], cfg).data))
        assert abs(lhs - rhs) <= 1e-5


def test_criterion_06_bias_recovery_and_similarity():
    rng = np.random.Generator(np.random.PCG64(60))
    heads, d, n = 2, 16, 64
    b = rng.normal(size=(heads, d))
    sigma = 0.01 * np.linalg.norm(b)
    maps = []
    for run in range(10):
        seg = Tensor((b[None] + rng.normal(0.0, sigma, size=(n, heads, d))).astype(np.float32))
        dec = decompose_bias(seg)
        for h in range(heads):
            cos = float(dec.bias[h] @ b[h]) / (np.linalg.norm(dec.bias[h]) * np.linalg.norm(b[h]))
            assert cos >= 0.999
        maps.append(norm_map(seg, label="k_source", step=run))
    sim = cross_run_similarity(maps)
    off_diag = sim[~np.eye(len(maps), dtype=bool)]
    assert off_diag.min() >= 0.999


def test_criterion_07_sweep_fixture_regression(tmp_path):
    start = time.perf_counter()
    golden = json.loads((__import__("pathlib").Path(__file__).parent / "golden" / "sweep_golden.json").read_text())
    cfg = ToyModelConfig.from_json_dict(golden["model"])
    assert cfg.seed == 42
    model = build_toy_model(cfg)
    inputs = seeded_inputs(cfg)

    delta_grid = tuple(p["delta_scale"] for p in golden["delta_only"]["points"])
    assert delta_grid == (1.0, 1.05, 1.1, 1.15)
    report = sweep(model, inputs, SweepSpec(mode=SweepMode.DELTA_ONLY, delta_scales=delta_grid))
    divs = [r.divergence for r in report.rows]
    assert divs[0] == 0.0
    assert all(a < b for a, b in zip(divs, divs[1:]))
    assert sorted(range(4), key=lambda i: divs[i]) == golden["delta_only"]["divergence_ordering"]

    joint = golden["joint"]
    report_j = sweep(
        model,
        inputs,
        SweepSpec(
            mode=SweepMode.JOINT,
            bias_scales=tuple(p["bias_scale"] for p in joint["points"]),
            delta_scales=tuple(p["delta_scale"] for p in joint["points"]),
        ),
    )
    divs_j = [r.divergence for r in report_j.rows]
    assert sorted(range(len(divs_j)), key=lambda i: divs_j[i]) == joint["divergence_ordering"]
    assert time.perf_counter() - start < 30.0


def test_criterion_08_interchange_fidelity(tmp_path):
    rng = np.random.Generator(np.random.PCG64(80))
    for i in range(50):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
        dtype = np.float32 if i % 2 == 0 else np.float64
        t = Tensor._wrap(rng.normal(size=shape).astype(dtype))
        path = tmp_path / f"t{i}.npy"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == t.dtype and back.shape == t.shape
        assert np.array_equal(back.array, t.array)

    bad_magic = tmp_path / "bad_magic.npy"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 64)
    try:
        read_tensor(bad_magic)
        assert False, "expected HeaderError"
    except HeaderError:
        pass

    truncated = tmp_path / "truncated.npy"
    write_tensor(truncated, rand((4, 4), 81))
    truncated.write_bytes(truncated.read_bytes()[:-8])
    try:
        read_tensor(truncated)
        assert False, "expected PayloadError"
    except PayloadError:
        pass

    try:
        read_tensor(tmp_path / "missing.npy")
        assert False, "expected FileNotFoundError"
    except FileNotFoundError:
        pass


def test_criterion_09_sweep_determinism(tmp_path):
    for run in ("one", "two"):
        assert main(["sweep", "--out", str(tmp_path / run)]) == 0
    assert (tmp_path / "one" / "report.csv").read_bytes() == (tmp_path / "two" / "report.csv").read_bytes()
    assert (tmp_path / "one" / "report.json").read_bytes() == (tmp_path / "two" / "report.json").read_bytes()


def test_criterion_10_bench_smoke(capsys):
    assert main(["bench"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["total_tokens"] == 1024
    assert report["heads"] == 8 and report["head_dim"] == 32
    assert report["seconds"] < 2.0
    assert report["tokens_per_s"] > 0
