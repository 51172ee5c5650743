"""Joint attention over a concatenated text / edit-image / source-image token
sequence, with rotary position embeddings.

All carriers use the canonical [batch, sequence, heads, head_dim] layout. The
sequence is partitioned text-first, then edit tokens, then source tokens; a
SegmentLayout owns that bookkeeping. Attention logits are always scaled by
1/sqrt(head_dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor, concat_seq

SEGMENT_NAMES = ("text", "edit", "source")


@dataclass(frozen=True)
class SegmentLayout:
    """Token counts of the three joint-sequence segments.

    Text occupies [0, n_text), edit-image tokens [n_text, n_text + n_img), and
    source-image tokens [n_text + n_img, n_text + 2 * n_img). The ranges are
    disjoint and cover the whole sequence.
    """

    n_text: int
    n_img: int

    def __post_init__(self):
        if self.n_text < 1 or self.n_img < 1:
            raise ConfigError(f"segment counts must be >= 1, got n_text={self.n_text}, n_img={self.n_img}")

    @property
    def total(self) -> int:
        return self.n_text + 2 * self.n_img

    @property
    def text_range(self) -> tuple[int, int]:
        return (0, self.n_text)

    @property
    def edit_range(self) -> tuple[int, int]:
        return (self.n_text, self.n_text + self.n_img)

    @property
    def source_range(self) -> tuple[int, int]:
        return (self.n_text + self.n_img, self.total)

    def range_of(self, segment: str) -> tuple[int, int]:
        try:
            return {
                "text": self.text_range,
                "edit": self.edit_range,
                "source": self.source_range,
            }[segment]
        except KeyError:
            raise ValueError(f"unknown segment {segment!r}; expected one of {SEGMENT_NAMES}") from None


@dataclass(frozen=True)
class RopeConfig:
    """Rotary position embedding schedule for one head dimension.

    Consecutive dimension pairs (2i, 2i+1) rotate by angle position * f_i with
    f_i = base ** (-2i / head_dim). head_dim must be even; base must be > 1.
    `enabled=False` turns apply_rope into the identity.
    """

    head_dim: int
    base: float = 10000.0
    enabled: bool = True

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ShapeError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not self.base > 1.0:
            raise ConfigError(f"rope base must be > 1, got {self.base}")


def rope_frequencies(cfg: RopeConfig) -> np.ndarray:
    """Per-pair frequencies f_i = base^(-2i/D), i = 0 .. D/2 - 1 (float64)."""
    i = np.arange(cfg.head_dim // 2, dtype=np.float64)
    return np.power(float(cfg.base), -2.0 * i / cfg.head_dim)


def dim_frequency(d: int, cfg: RopeConfig) -> float:
    """Rotation frequency of head dimension d: base^(-2*floor(d/2)/D).
    Non-increasing in d; dims 0 and 1 always map to 1.0."""
    if not 0 <= d < cfg.head_dim:
        raise ShapeError(f"dim index {d} out of range for head_dim {cfg.head_dim}")
    return float(np.power(float(cfg.base), -2.0 * (d // 2) / cfg.head_dim))


def token_positions(
    layout: SegmentLayout, duplicate_source: bool = True, rotate_text: bool = True
) -> np.ndarray:
    """Flat 1-D position index for the joint sequence.

    Text tokens take 0..n_text-1 and edit tokens continue from there. With
    duplicate_source=True (default) the source segment repeats the edit
    segment's positions, mirroring conditioning-token replication in editing
    stacks; otherwise positions keep increasing. rotate_text=False pins every
    text position to 0 (the rotation identity), for hosts whose pipelines
    leave text tokens unrotated.
    """
    if rotate_text:
        text = np.arange(layout.n_text)
    else:
        text = np.zeros(layout.n_text, dtype=np.int64)
    edit = np.arange(layout.n_text, layout.n_text + layout.n_img)
    if duplicate_source:
        source = edit.copy()
    else:
        source = np.arange(layout.n_text + layout.n_img, layout.total)
    return np.concatenate([text, edit, source])


def apply_rope(x: Tensor, positions: Sequence[int] | np.ndarray, cfg: RopeConfig) -> Tensor:
    """Rotate each (even, odd) dimension pair of x[b, s, h, :] by
    positions[s] * f_pair. Angles and trig tables are computed in float64 so
    the relative-position property survives float32 storage; the per-pair
    Euclidean norm is preserved. Position 0 (or enabled=False) is the identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"apply_rope expects [B, S, H, D], got shape {x.shape}")
    b, s, h, d = x.shape
    if d != cfg.head_dim:
        raise ShapeError(f"tensor head_dim {d} != rope head_dim {cfg.head_dim}")
    if not cfg.enabled:
        return x
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (s,):
        raise ShapeError(f"positions must have length {s}, got shape {pos.shape}")

    angles = np.outer(pos, rope_frequencies(cfg))  # [S, D/2], float64
    cos = np.cos(angles).astype(x.array.dtype)[None, :, None, :]
    sin = np.sin(angles).astype(x.array.dtype)[None, :, None, :]

    a = x.array
    even = a[..., 0::2]
    odd = a[..., 1::2]
    out = np.empty_like(a)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return Tensor._wrap(out)


@dataclass(frozen=True)
class ProjectionWeights:
    """Per-modality projection matrices into the shared attention space.

    Text matrices are [d_text, d] and image matrices [d_img, d] with
    d = heads * head_dim; edit and source image tokens share the image-side
    weights. Column h * head_dim + j feeds head h, dimension j.
    """

    w_q_text: Tensor
    w_k_text: Tensor
    w_v_text: Tensor
    w_q_img: Tensor
    w_k_img: Tensor
    w_v_img: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        d = self.heads * self.head_dim
        text = (self.w_q_text, self.w_k_text, self.w_v_text)
        img = (self.w_q_img, self.w_k_img, self.w_v_img)
        for w in text + img:
            if w.ndim != 2 or w.shape[1] != d:
                raise ShapeError(f"projection matrix must be [*, {d}], got {w.shape}")
        if len({w.shape[0] for w in text}) != 1 or len({w.shape[0] for w in img}) != 1:
            raise ShapeError("Q/K/V matrices of one modality must share their input width")

    @property
    def d_text(self) -> int:
        return self.w_q_text.shape[0]

    @property
    def d_img(self) -> int:
        return self.w_q_img.shape[0]

    @property
    def d(self) -> int:
        return self.heads * self.head_dim


class ProjectedTokens(NamedTuple):
    """Per-segment Q/K/V after projection, each [B, N_seg, H, D] in
    (text, edit, source) order."""

    q: tuple[Tensor, Tensor, Tensor]
    k: tuple[Tensor, Tensor, Tensor]
    v: tuple[Tensor, Tensor, Tensor]

    def joint(self) -> tuple[Tensor, Tensor, Tensor]:
        """Concatenate the segments back into joint-sequence Q, K, V."""
        return concat_seq(self.q), concat_seq(self.k), concat_seq(self.v)


def _project_segment(tokens: Tensor, w: Tensor, heads: int, head_dim: int) -> Tensor:
    b, n, width = tokens.shape
    if width != w.shape[0]:
        raise ShapeError(f"token width {width} does not match projection input width {w.shape[0]}")
    flat = np.matmul(tokens.array, w.array)
    return Tensor._wrap(flat.reshape(b, n, heads, head_dim))


def project_tokens(text: Tensor, edit: Tensor, source: Tensor, w: ProjectionWeights) -> ProjectedTokens:
    """Map text tokens [B, N_txt, d_text] and both image-token segments
    [B, N_img, d_img] into shared-space Q/K/V, reshaped to [B, N, H, D]."""
    for name, t in (("text", text), ("edit", edit), ("source", source)):
        if t.ndim != 3:
            raise ShapeError(f"{name} tokens must be [B, N, width], got {t.shape}")
    if edit.shape != source.shape:
        raise ShapeError(f"edit/source token shapes differ: {edit.shape} vs {source.shape}")
    h, d = w.heads, w.head_dim
    return ProjectedTokens(
        q=(
            _project_segment(text, w.w_q_text, h, d),
            _project_segment(edit, w.w_q_img, h, d),
            _project_segment(source, w.w_q_img, h, d),
        ),
        k=(
            _project_segment(text, w.w_k_text, h, d),
            _project_segment(edit, w.w_k_img, h, d),
            _project_segment(source, w.w_k_img, h, d),
        ),
        v=(
            _project_segment(text, w.w_v_text, h, d),
            _project_segment(edit, w.w_v_img, h, d),
            _project_segment(source, w.w_v_img, h, d),
        ),
    )


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, layout: SegmentLayout | None) -> None:
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("attention expects [B, S, H, D] tensors")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if layout is not None and q.shape[1] != layout.total:
        raise ShapeError(f"sequence length {q.shape[1]} does not match layout total {layout.total}")


def joint_attention(q: Tensor, k: Tensor, v: Tensor, layout: SegmentLayout | None = None) -> Tensor:
    """Full joint attention over the concatenated sequence: per head,
    softmax(Q K^T / sqrt(head_dim)) V, output [B, S, H, D]. When a layout is
    given the sequence length is validated against it; a single-token sequence
    (softmax over one logit) returns V exactly."""
    _check_qkv(q, k, v, layout)
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = np.einsum("bihd,bjhd->bhij", q.array, k.array) * scale
    probs = _stable_softmax(logits)
    out = np.einsum("bhij,bjhd->bihd", probs, v.array)
    return Tensor._wrap(np.ascontiguousarray(out))


def edit_attention_probs(q_edit: Tensor, k: Tensor, layout: SegmentLayout) -> Tensor:
    """The edit-query rows of the joint attention map, [B, N_img, H, S].

    Row (i, j) is exp(<q_edit_i, k_j> / sqrt(D)) normalized by the sum of the
    text, edit, and source partial sums, so each row sums to 1 and equals the
    corresponding row of the full joint softmax.
    """
    if q_edit.ndim != 4 or k.ndim != 4:
        raise ShapeError("edit_attention_probs expects [B, S, H, D] tensors")
    if q_edit.shape[1] != layout.n_img:
        raise ShapeError(f"edit-query count {q_edit.shape[1]} != layout n_img {layout.n_img}")
    if k.shape[1] != layout.total:
        raise ShapeError(f"key count {k.shape[1]} != layout total {layout.total}")
    if q_edit.shape[-1] != k.shape[-1] or q_edit.shape[2] != k.shape[2]:
        raise ShapeError(f"query/key head shapes differ: {q_edit.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(q_edit.shape[-1])
    logits = np.einsum("bihd,bjhd->bihj", q_edit.array, k.array) * scale
    return Tensor._wrap(_stable_softmax(logits))


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def joint_attention_flops(batch: int, seq: int, heads: int, head_dim: int) -> int:
    """Rough FLOP count of one forward: the two S x S matmuls plus the
    softmax's exp/sum/div."""
    matmuls = 2 * 2 * batch * heads * seq * seq * head_dim
    softmax = 3 * batch * heads * seq * seq
    return matmuls + softmax
