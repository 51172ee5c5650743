"""Command-line surface: tensor-dump analysis, guided key rewriting, guidance
sweeps, conformance bundles, and a throughput smoke check.

Exit codes: 0 success, 1 validation or input failure, 2 conformance failure.
Set GRAG_THREADS to cap the BLAS thread pool; all randomness derives from the
--seed flag (default 42).
"""

from __future__ import annotations

import os

_threads = os.environ.get("GRAG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import (
    SEGMENT_LABELS,
    canonical_label,
    cross_run_similarity,
    frequency_band_report,
    head_stats,
    norm_map,
)
from .attention import RopeConfig, SegmentLayout, joint_attention_flops
from .conformance import DEFAULT_TOLERANCE, check_conformance_bundle, generate_conformance_bundle
from .errors import GragError
from .guidance import GragConfig, apply_grag
from .model import ToyModelConfig, build_toy_model, seeded_inputs
from .numerics import Tensor
from .sweep import sweep, sweep_config_from_json
from .tensor_io import load_dump_bundle, write_dump_bundle

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFORMANCE = 2


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines.extend(",".join(str(c) for c in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


def _segment_slice(tensor: Tensor, layout: SegmentLayout, segment: str) -> Tensor:
    start, end = layout.range_of(segment)
    return Tensor._wrap(tensor.array[0, start:end].copy())


def _cmd_analyze(args) -> int:
    bundle = load_dump_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = [canonical_label(s) for s in args.segments.split(",")] if args.segments else list(SEGMENT_LABELS)
    rope = RopeConfig(head_dim=bundle.head_dim, base=args.rope_base)

    norm_rows, stat_rows, mag_rows, sim_rows, band_reports = [], [], [], [], []
    maps: dict[tuple[int, str], list] = {}
    for layer in bundle.layers:
        for step in bundle.steps:
            for label in labels:
                source_name = "Q" if label.startswith("q_") else "K"
                if (layer, step, source_name) not in bundle.entries:
                    continue
                segment = label.split("_", 1)[1]
                tokens = _segment_slice(bundle.get(layer, step, source_name), bundle.layout, segment)
                nm = norm_map(tokens, label=label, layer=layer, step=step)
                maps.setdefault((layer, label), []).append(nm)
                band_reports.append(frequency_band_report(nm, rope))
                hs = head_stats(tokens)
                for h in range(bundle.heads):
                    mag_rows.append((layer, step, label, h, _fmt(hs.mean_magnitude[h])))
                    for d in range(bundle.head_dim):
                        norm_rows.append((layer, step, label, h, d, _fmt(nm.values[h, d])))
                        stat_rows.append((layer, step, label, h, d, _fmt(hs.mean[h, d]), _fmt(hs.std[h, d])))
    for (layer, label), group in sorted(maps.items()):
        if len(group) < 2:
            continue
        sim = cross_run_similarity(group)
        for i, a in enumerate(group):
            for j, b in enumerate(group):
                if i <= j:
                    sim_rows.append((layer, label, a.step, b.step, _fmt(sim[i, j])))

    _write_csv(out / "norms.csv", "layer,step,segment,head,dim,value", norm_rows)
    _write_csv(out / "head_stats.csv", "layer,step,segment,head,dim,mean,std", stat_rows)
    _write_csv(out / "head_magnitudes.csv", "layer,step,segment,head,mean_magnitude", mag_rows)
    _write_csv(out / "similarity.csv", "layer,segment,step_a,step_b,cosine", sim_rows)
    summary = {
        "schema_version": 1,
        "bundle": {
            "producer": bundle.producer,
            "layers": bundle.layers,
            "steps": bundle.steps,
            "heads": bundle.heads,
            "head_dim": bundle.head_dim,
            "dtype": bundle.dtype,
            "n_text": bundle.layout.n_text,
            "n_img": bundle.layout.n_img,
        },
        "segments": labels,
        "rope_base": args.rope_base,
        "frequency_bands": band_reports,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"analyzed {len(bundle.entries)} tensors -> {out}")
    return EXIT_OK


def _cmd_apply(args) -> int:
    bundle = load_dump_bundle(args.bundle)
    cfg = GragConfig.from_json_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transformed: dict[tuple[int, int, str], Tensor] = {}
    for (layer, step, name) in sorted(bundle.entries):
        if name != "K":
            continue
        k = bundle.get(layer, step, name)
        transformed[(layer, step, name)] = apply_grag(k, cfg, bundle.layout) if cfg.applies_to_layer(layer) else k
    if not transformed:
        print("bundle contains no K tensors", file=sys.stderr)
        return EXIT_VALIDATION
    write_dump_bundle(
        out,
        transformed,
        bundle.layout,
        bundle.heads,
        bundle.head_dim,
        producer=f"{bundle.producer} +grag(bias={cfg.bias_scale}, delta={cfg.delta_scale})",
    )
    print(f"wrote {len(transformed)} guided K tensors -> {out}")
    return EXIT_OK


def default_sweep_config() -> dict:
    with resources.files("grag.data").joinpath("default_sweep.json").open("r", encoding="utf-8") as f:
        return json.load(f)


def _cmd_sweep(args) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            obj = json.load(f)
    else:
        obj = default_sweep_config()
    model_cfg, spec, meta = sweep_config_from_json(obj)
    seed = args.seed if args.seed is not None else meta["seed"]
    model_cfg = ToyModelConfig.from_json_dict({**model_cfg.to_json_dict(), "seed": seed})
    model = build_toy_model(model_cfg)
    inputs = seeded_inputs(model_cfg, batch=meta["batch_size"])
    report = sweep(model, inputs, spec)
    csv_path, json_path = report.write(args.out)
    print(f"swept {len(report.rows)} grid points ({report.mode.value}) -> {csv_path}, {json_path}")
    return EXIT_OK


def _cmd_conformance(args) -> int:
    if args.generate:
        root = generate_conformance_bundle(args.generate, seed=args.seed)
        print(f"generated conformance bundle -> {root}")
        return EXIT_OK
    report = check_conformance_bundle(args.check, tolerance=args.tol)
    for case in report.cases:
        print(f"  {case.name:<24} max_abs_diff={case.max_abs_diff:.3e} [{'PASS' if case.passed else 'FAIL'}]")
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if args.report_csv:
        Path(args.report_csv).write_text(report.to_csv_text(), encoding="utf-8", newline="")
    print(f"conformance: {'PASS' if report.passed else 'FAIL'} (tol={report.tolerance})")
    return EXIT_OK if report.passed else EXIT_CONFORMANCE


def _cmd_bench(args) -> int:
    from .attention import joint_attention

    cfg = {"n_text": 64, "n_img": 480, "heads": 8, "head_dim": 32, "seed": args.seed}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg.update(json.load(f))
    layout = SegmentLayout(int(cfg["n_text"]), int(cfg["n_img"]))
    heads, head_dim = int(cfg["heads"]), int(cfg["head_dim"])
    rng = np.random.Generator(np.random.PCG64(int(cfg["seed"])))
    shape = (1, layout.total, heads, head_dim)
    q, k, v = (Tensor._wrap(rng.normal(size=shape).astype(np.float32)) for _ in range(3))
    start = time.perf_counter()
    joint_attention(q, k, v, layout)
    elapsed = time.perf_counter() - start
    flops = joint_attention_flops(1, layout.total, heads, head_dim)
    result = {
        "total_tokens": layout.total,
        "heads": heads,
        "head_dim": head_dim,
        "seconds": elapsed,
        "tokens_per_s": layout.total / elapsed,
        "attention_flops_est": flops,
        "gflops_per_s": flops / elapsed / 1e9,
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="norm maps, head statistics, and cross-step similarity from a dump bundle")
    p.add_argument("--bundle", required=True, help="dump bundle directory")
    p.add_argument("--out", required=True, help="output directory for CSV/JSON reports")
    p.add_argument("--segments", default="", help="comma-separated segment labels (default: all six)")
    p.add_argument("--rope-base", type=float, default=10000.0, help="frequency base for the band report")
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("apply", help="rewrite a bundle's K tensors under a guidance config")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", required=True, help="guidance config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_apply)

    p = sub.add_parser("sweep", help="grid-sweep guidance scales on the toy model")
    p.add_argument("--config", default=None, help="sweep config JSON (default: packaged grids)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("conformance", help="generate or check a golden conformance bundle")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--generate", metavar="DIR")
    group.add_argument("--check", metavar="DIR")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--report", default=None, help="also write the check report as JSON")
    p.add_argument("--report-csv", default=None, help="also write the check report as CSV")
    p.set_defaults(fn=_cmd_conformance)

    p = sub.add_parser("bench", help="single joint-attention throughput smoke check")
    p.add_argument("--config", default=None, help="JSON overriding n_text/n_img/heads/head_dim/seed")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (GragError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
