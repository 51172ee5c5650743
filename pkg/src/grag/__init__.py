"""Group-relative attention guidance over joint text/image attention, with
the embedding-bias analysis toolkit and a sweep/conformance harness.

Submodules import lazily so the CLI can configure BLAS threading before any
numerical code loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # numerics
    "Tensor": "numerics",
    "tensor": "numerics",
    "softmax_lastdim": "numerics",
    "matmul": "numerics",
    "reduce": "numerics",
    "slice_seq": "numerics",
    "concat_seq": "numerics",
    # attention
    "SegmentLayout": "attention",
    "RopeConfig": "attention",
    "ProjectionWeights": "attention",
    "ProjectedTokens": "attention",
    "apply_rope": "attention",
    "dim_frequency": "attention",
    "rope_frequencies": "attention",
    "token_positions": "attention",
    "project_tokens": "attention",
    "joint_attention": "attention",
    "edit_attention_probs": "attention",
    "joint_attention_flops": "attention",
    # guidance
    "GroupSelector": "guidance",
    "GragConfig": "guidance",
    "group_bias": "guidance",
    "apply_grag": "guidance",
    "grag_attention": "guidance",
    "resolve_group_range": "guidance",
    # analysis
    "NormMap": "analysis",
    "HeadStats": "analysis",
    "BiasDecomposition": "analysis",
    "SegmentSoftmaxTerms": "analysis",
    "norm_map": "analysis",
    "head_stats": "analysis",
    "decompose_bias": "analysis",
    "softmax_via_decomposition": "analysis",
    "cross_run_similarity": "analysis",
    "frequency_band_report": "analysis",
    # model / sweep / io / conformance
    "ToyModelConfig": "model",
    "ToyModel": "model",
    "EditInputs": "model",
    "build_toy_model": "model",
    "seeded_inputs": "model",
    "run_edit_pass": "model",
    "cfg_combine": "model",
    "dump_toy_activations": "model",
    "SweepMode": "sweep",
    "SweepSpec": "sweep",
    "SweepReport": "sweep",
    "sweep": "sweep",
    "segment_attention_mass": "sweep",
    "write_tensor": "tensor_io",
    "read_tensor": "tensor_io",
    "DumpBundle": "tensor_io",
    "load_dump_bundle": "tensor_io",
    "write_dump_bundle": "tensor_io",
    "generate_conformance_bundle": "conformance",
    "check_conformance_bundle": "conformance",
    # errors
    "GragError": "errors",
    "ShapeError": "errors",
    "ConfigError": "errors",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(f".{module}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
