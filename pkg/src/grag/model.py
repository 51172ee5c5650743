"""Small deterministic joint-attention block stack used as the sweep and
analysis workbench.

Each block projects its token segments into the shared attention space,
position-encodes Q and K, optionally reweights the guided key group, runs
joint attention, and mixes the result through a per-token affine output. The
first block consumes the raw text/image token widths; later blocks operate at
the shared width d = heads * head_dim. All weights are drawn i.i.d. from
uniform(-1/sqrt(d), 1/sqrt(d)) with NumPy's PCG64 generator, so a seed pins
every weight bit-exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    ProjectionWeights,
    RopeConfig,
    SegmentLayout,
    apply_rope,
    edit_attention_probs,
    joint_attention,
    project_tokens,
    token_positions,
)
from .errors import ConfigError, ShapeError
from .guidance import GragConfig, apply_grag
from .numerics import Tensor
from .tensor_io import DumpBundle, write_dump_bundle

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ToyModelConfig:
    """Geometry and seed of the toy block stack. Defaults keep segment effects
    visible while all-oracle runs stay in the milliseconds."""

    layers: int = 4
    n_text: int = 8
    n_img: int = 16
    d_text: int = 32
    d_img: int = 64
    heads: int = 4
    head_dim: int = 32
    seed: int = 42
    rope: RopeConfig | None = None
    duplicate_source_positions: bool = True
    rope_text_tokens: bool = True

    def __post_init__(self):
        for name in ("layers", "n_text", "n_img", "d_text", "d_img", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.rope is None:
            object.__setattr__(self, "rope", RopeConfig(head_dim=self.head_dim))
        elif self.rope.head_dim != self.head_dim:
            raise ConfigError(f"rope head_dim {self.rope.head_dim} != model head_dim {self.head_dim}")

    @property
    def layout(self) -> SegmentLayout:
        return SegmentLayout(self.n_text, self.n_img)

    @property
    def d(self) -> int:
        return self.heads * self.head_dim

    def to_json_dict(self) -> dict:
        return {
            "layers": self.layers,
            "n_text": self.n_text,
            "n_img": self.n_img,
            "d_text": self.d_text,
            "d_img": self.d_img,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "seed": self.seed,
            "rope_base": self.rope.base,
            "rope_enabled": self.rope.enabled,
            "duplicate_source_positions": self.duplicate_source_positions,
            "rope_text_tokens": self.rope_text_tokens,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ToyModelConfig":
        head_dim = int(obj.get("head_dim", 32))
        rope = RopeConfig(
            head_dim=head_dim,
            base=float(obj.get("rope_base", 10000.0)),
            enabled=bool(obj.get("rope_enabled", True)),
        )
        return cls(
            layers=int(obj.get("layers", 4)),
            n_text=int(obj.get("n_text", 8)),
            n_img=int(obj.get("n_img", 16)),
            d_text=int(obj.get("d_text", 32)),
            d_img=int(obj.get("d_img", 64)),
            heads=int(obj.get("heads", 4)),
            head_dim=head_dim,
            seed=int(obj.get("seed", 42)),
            rope=rope,
            duplicate_source_positions=bool(obj.get("duplicate_source_positions", True)),
            rope_text_tokens=bool(obj.get("rope_text_tokens", True)),
        )


@dataclass(frozen=True)
class LayerWeights:
    proj: ProjectionWeights
    w_out: Tensor  # [d, d]
    b_out: Tensor  # [d]


@dataclass(frozen=True)
class ToyModel:
    config: ToyModelConfig
    layers: tuple[LayerWeights, ...]

    @property
    def layout(self) -> SegmentLayout:
        return self.config.layout

    def checksum(self) -> str:
        """SHA-256 over every weight buffer in layer order; equal seeds give
        equal checksums bit for bit."""
        h = hashlib.sha256()
        for lw in self.layers:
            p = lw.proj
            for t in (p.w_q_text, p.w_k_text, p.w_v_text, p.w_q_img, p.w_k_img, p.w_v_img, lw.w_out, lw.b_out):
                h.update(t.array.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class EditInputs:
    """One editing instance: text tokens [B, n_text, d_text] and the edit /
    source image token sets [B, n_img, d_img]."""

    text: Tensor
    edit: Tensor
    source: Tensor

    def __post_init__(self):
        for name, t in (("text", self.text), ("edit", self.edit), ("source", self.source)):
            if t.ndim != 3:
                raise ShapeError(f"{name} tokens must be [B, N, width], got {t.shape}")
        if self.edit.shape != self.source.shape or self.text.shape[0] != self.edit.shape[0]:
            raise ShapeError("text/edit/source token shapes are inconsistent")


def _rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    # Child 0 feeds weights, child 1 feeds inputs; both derive from one seed.
    children = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(children[0])), np.random.Generator(np.random.PCG64(children[1]))


def _uniform(rng: np.random.Generator, bound: float, shape: tuple[int, ...]) -> Tensor:
    return Tensor._wrap(rng.uniform(-bound, bound, size=shape).astype(np.float32))


def build_toy_model(cfg: ToyModelConfig) -> ToyModel:
    """Materialize the block stack from the config seed. Fully deterministic:
    the same seed produces bit-identical weights."""
    rng, _ = _rng_streams(cfg.seed)
    d = cfg.d
    bound = 1.0 / np.sqrt(d)
    layers = []
    for layer in range(cfg.layers):
        d_text = cfg.d_text if layer == 0 else d
        d_img = cfg.d_img if layer == 0 else d
        proj = ProjectionWeights(
            w_q_text=_uniform(rng, bound, (d_text, d)),
            w_k_text=_uniform(rng, bound, (d_text, d)),
            w_v_text=_uniform(rng, bound, (d_text, d)),
            w_q_img=_uniform(rng, bound, (d_img, d)),
            w_k_img=_uniform(rng, bound, (d_img, d)),
            w_v_img=_uniform(rng, bound, (d_img, d)),
            heads=cfg.heads,
            head_dim=cfg.head_dim,
        )
        layers.append(
            LayerWeights(
                proj=proj,
                w_out=_uniform(rng, bound, (d, d)),
                b_out=_uniform(rng, bound, (d,)),
            )
        )
    return ToyModel(config=cfg, layers=tuple(layers))


def seeded_inputs(cfg: ToyModelConfig, batch: int = 1, seed: int | None = None) -> EditInputs:
    """Standard-normal float32 token inputs drawn from the input stream of the
    given seed (defaults to the model seed)."""
    _, rng = _rng_streams(cfg.seed if seed is None else seed)
    return EditInputs(
        text=Tensor._wrap(rng.normal(size=(batch, cfg.n_text, cfg.d_text)).astype(np.float32)),
        edit=Tensor._wrap(rng.normal(size=(batch, cfg.n_img, cfg.d_img)).astype(np.float32)),
        source=Tensor._wrap(rng.normal(size=(batch, cfg.n_img, cfg.d_img)).astype(np.float32)),
    )


def _forward(
    model: ToyModel,
    inputs: EditInputs,
    grag: GragConfig | None,
    zero_text_keys: bool,
    probe: Callable[[int, Tensor, Tensor, Tensor], None] | None = None,
) -> Tensor:
    cfg = model.config
    layout = cfg.layout
    if inputs.text.shape[1] != cfg.n_text or inputs.text.shape[2] != cfg.d_text:
        raise ShapeError(f"text tokens {inputs.text.shape} do not match model ({cfg.n_text}, {cfg.d_text})")
    if inputs.edit.shape[1] != cfg.n_img or inputs.edit.shape[2] != cfg.d_img:
        raise ShapeError(f"image tokens {inputs.edit.shape} do not match model ({cfg.n_img}, {cfg.d_img})")
    positions = token_positions(layout, cfg.duplicate_source_positions, cfg.rope_text_tokens)
    batch = inputs.text.shape[0]
    d = cfg.d

    text, edit, source = inputs.text, inputs.edit, inputs.source
    hidden = None
    for layer_idx, lw in enumerate(model.layers):
        proj = project_tokens(text, edit, source, lw.proj)
        q, k, v = proj.joint()
        q = apply_rope(q, positions, cfg.rope)
        k = apply_rope(k, positions, cfg.rope)
        if zero_text_keys:
            masked = k.array.copy()
            masked[:, : layout.n_text] = 0.0
            k = Tensor._wrap(masked)
        if grag is not None and grag.applies_to_layer(layer_idx):
            k = apply_grag(k, grag, layout)
        if probe is not None:
            probe(layer_idx, q, k, v)
        attn = joint_attention(q, k, v, layout)
        flat = attn.array.reshape(batch, layout.total, d)
        hidden = np.matmul(flat, lw.w_out.array) + lw.b_out.array
        e0, e1 = layout.edit_range
        s0, s1 = layout.source_range
        text = Tensor._wrap(hidden[:, : layout.n_text].copy())
        edit = Tensor._wrap(hidden[:, e0:e1].copy())
        source = Tensor._wrap(hidden[:, s0:s1].copy())
    return edit


def run_edit_pass(
    model: ToyModel,
    inputs: EditInputs,
    grag: GragConfig | None = None,
    *,
    zero_text_keys: bool = False,
    return_probes: bool = False,
):
    """Run the stack and return the final edit-segment representation
    [B, n_img, d]. Omitting `grag` is bit-identical to passing the identity
    scales. With return_probes=True, also returns each layer's edit-query
    attention probabilities [B, n_img, H, S] as seen by that layer.

    zero_text_keys silences the text keys (after position encoding, before
    guidance), the stack's stand-in for an unconditional pass.
    """
    probes: list[Tensor] = []
    layout = model.layout

    def capture(_layer: int, q: Tensor, k: Tensor, _v: Tensor) -> None:
        e0, e1 = layout.edit_range
        q_edit = Tensor._wrap(q.array[:, e0:e1].copy())
        probes.append(edit_attention_probs(q_edit, k, layout))

    out = _forward(model, inputs, grag, zero_text_keys, capture if return_probes else None)
    if return_probes:
        return out, probes
    return out


def cfg_combine(uncond: Tensor, cond: Tensor, s: float) -> Tensor:
    """Classifier-free-guidance combination uncond + s * (cond - uncond).
    s=1 returns cond exactly and s=0 returns uncond exactly."""
    if uncond.shape != cond.shape:
        raise ShapeError(f"cfg_combine shapes differ: {uncond.shape} vs {cond.shape}")
    if s == 1.0:
        return cond
    if s == 0.0:
        return uncond
    return Tensor._wrap(uncond.array + s * (cond.array - uncond.array))


def dump_toy_activations(
    model: ToyModel,
    inputs: EditInputs,
    out_dir,
    steps: int = 1,
    step_noise: float = 0.0,
    grag: GragConfig | None = None,
) -> DumpBundle:
    """Capture each layer's attention inputs (position-encoded Q and K, raw V)
    into a dump bundle. Steps beyond the first perturb the inputs with seeded
    Gaussian noise of scale step_noise, a synthetic stand-in for denoising
    timesteps."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if inputs.text.shape[0] != 1:
        raise ShapeError("dump bundles carry batch size 1")
    cfg = model.config
    tensors: dict[tuple[int, int, str], Tensor] = {}
    for step in range(steps):
        if step == 0 or step_noise == 0.0:
            step_inputs = inputs
        else:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 7, step])))
            step_inputs = EditInputs(
                text=Tensor._wrap(inputs.text.array + step_noise * rng.normal(size=inputs.text.shape).astype(np.float32)),
                edit=Tensor._wrap(inputs.edit.array + step_noise * rng.normal(size=inputs.edit.shape).astype(np.float32)),
                source=Tensor._wrap(inputs.source.array + step_noise * rng.normal(size=inputs.source.shape).astype(np.float32)),
            )

        def capture(layer: int, q: Tensor, k: Tensor, v: Tensor, _step=step) -> None:
            tensors[(layer, _step, "Q")] = q
            tensors[(layer, _step, "K")] = k
            tensors[(layer, _step, "V")] = v

        _forward(model, step_inputs, grag, False, capture)
    return write_dump_bundle(
        out_dir,
        tensors,
        cfg.layout,
        cfg.heads,
        cfg.head_dim,
        producer=f"grag-toy-model seed={cfg.seed}",
    )
