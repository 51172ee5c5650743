"""Embedding-statistics toolkit for attention activations.

Works on one segment of one layer's Q or K embeddings, shaped
[tokens, heads, head_dim] (batch size 1 is assumed upstream). Provides the
per-(head, dim) norm map, per-head token statistics, the bias + deviation
decomposition of a segment, a bias-factored softmax that is algebraically
identical to the direct edit-row softmax, and cross-run similarity of norm
maps. Statistics are computed in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import RopeConfig, SegmentLayout, dim_frequency
from .errors import ShapeError
from .numerics import Tensor

SEGMENT_LABELS = ("q_text", "q_edit", "q_source", "k_text", "k_edit", "k_source")

_LABEL_ALIASES = {
    "q_src": "q_source",
    "k_src": "k_source",
    "q_txt": "q_text",
    "k_txt": "k_text",
}


def canonical_label(label: str) -> str:
    """Normalize a segment label, accepting the short q_src/k_src spellings."""
    name = label.strip().lower()
    name = _LABEL_ALIASES.get(name, name)
    if name not in SEGMENT_LABELS:
        raise ValueError(f"unknown segment label {label!r}; expected one of {SEGMENT_LABELS}")
    return name


def _segment_array(segment: Tensor) -> np.ndarray:
    if segment.ndim != 3:
        raise ShapeError(f"expected [tokens, heads, head_dim], got {segment.shape}")
    return segment.array.astype(np.float64)


@dataclass(frozen=True)
class NormMap:
    """Per-(head, dim) L2 norm of a segment over its token axis, plus where it
    came from."""

    values: np.ndarray  # [H, D], float64, >= 0
    segment: str = ""
    layer: int = 0
    step: int = 0

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def head_dim(self) -> int:
        return self.values.shape[1]


def norm_map(segment: Tensor, *, label: str = "", layer: int = 0, step: int = 0) -> NormMap:
    """E[h, d] = sqrt(sum over tokens of segment[s, h, d]^2)."""
    arr = _segment_array(segment)
    values = np.sqrt(np.square(arr).sum(axis=0))
    return NormMap(values=values, segment=label, layer=layer, step=step)


@dataclass(frozen=True)
class HeadStats:
    """Per-head token statistics: mean and population std of each dim, plus
    the L2 magnitude of each head's mean vector."""

    mean: np.ndarray  # [H, D]
    std: np.ndarray  # [H, D], population (divisor N)
    mean_magnitude: np.ndarray  # [H]


def head_stats(segment: Tensor) -> HeadStats:
    arr = _segment_array(segment)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    return HeadStats(mean=mean, std=std, mean_magnitude=np.sqrt(np.square(mean).sum(axis=-1)))


@dataclass(frozen=True)
class BiasDecomposition:
    """A segment split into its shared bias (the token mean, the same
    estimator the guidance uses) and per-token deviations.

    bias + deltas[i] reconstructs token i: bit-exact in float32 (the fields
    are held in float64, so the round trip through the wider precision is
    below half a float32 ulp), and within one ulp of max(|token|, |delta|)
    for float64 segments, where the subtraction itself rounds. Deviations sum
    to zero over tokens up to rounding.
    """

    bias: np.ndarray  # [H, D], float64
    deltas: np.ndarray  # [N, H, D], float64
    segment: str = ""
    dtype: str = "float32"

    @property
    def n_tokens(self) -> int:
        return self.deltas.shape[0]

    def reconstruct(self) -> Tensor:
        """bias + deltas, cast back to the source dtype."""
        return Tensor(self.bias[None, :, :] + self.deltas, dtype=self.dtype)


def decompose_bias(segment: Tensor, *, label: str = "") -> BiasDecomposition:
    arr = _segment_array(segment)
    bias = arr.mean(axis=0)
    return BiasDecomposition(bias=bias, deltas=arr - bias, segment=label, dtype=segment.dtype)


@dataclass(frozen=True)
class SegmentSoftmaxTerms:
    """The bias-factored softmax pieces for one edit query: per segment, the
    bias logit <q, k_bias_seg> and the deviation sum  sum_p exp(<q, delta_p>).
    The denominator of the factored softmax is
    sum over segments of exp(bias_logit) * delta_sum."""

    bias_logits: dict[str, float]
    delta_sums: dict[str, float]

    def denominator(self) -> float:
        return float(
            sum(np.exp(self.bias_logits[s]) * self.delta_sums[s] for s in self.bias_logits)
        )


def softmax_via_decomposition(
    q: np.ndarray | Tensor,
    text: BiasDecomposition,
    edit: BiasDecomposition,
    source: BiasDecomposition,
    layout: SegmentLayout,
    *,
    head: int = 0,
    scale: float | None = None,
) -> tuple[np.ndarray, SegmentSoftmaxTerms]:
    """Attention probabilities of one edit query computed from the bias/delta
    decomposition instead of the raw keys.

    Each key logit factors as <q, k_bias_seg> + <q, delta>, so the row equals
    the direct softmax over raw keys; this is the executable form of that
    identity. The probability path is evaluated in log space for stability;
    the returned SegmentSoftmaxTerms carry the raw factors, showing how large
    shared bias logits dilute the influence of individual deviations.

    q is a single head-dim vector; decompositions may carry several heads, and
    `head` picks the slice. scale defaults to 1/sqrt(D) to match the direct
    attention path.
    """
    qv = (q.array if isinstance(q, Tensor) else np.asarray(q)).astype(np.float64)
    if qv.ndim != 1:
        raise ShapeError(f"q must be a vector, got shape {qv.shape}")
    decomps = {"text": text, "edit": edit, "source": source}
    counts = {"text": layout.n_text, "edit": layout.n_img, "source": layout.n_img}
    for name, dec in decomps.items():
        if dec.n_tokens != counts[name]:
            raise ShapeError(
                f"{name} decomposition has {dec.n_tokens} tokens, layout expects {counts[name]}"
            )
        if not 0 <= head < dec.bias.shape[0]:
            raise ShapeError(f"head {head} out of range for {name} decomposition")
        if dec.bias.shape[1] != qv.shape[0]:
            raise ShapeError(f"q length {qv.shape[0]} != head_dim {dec.bias.shape[1]}")
    if scale is None:
        scale = 1.0 / np.sqrt(qv.shape[0])
    qs = qv * scale

    bias_logits = {name: float(qs @ dec.bias[head]) for name, dec in decomps.items()}
    delta_logits = {name: dec.deltas[:, head, :] @ qs for name, dec in decomps.items()}
    terms = SegmentSoftmaxTerms(
        bias_logits=bias_logits,
        delta_sums={name: float(np.exp(delta_logits[name]).sum()) for name in decomps},
    )

    # Factored logits, normalized in log space.
    order = ("text", "edit", "source")
    logits = np.concatenate([bias_logits[name] + delta_logits[name] for name in order])
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum(), terms


def cross_run_similarity(maps: list[NormMap]) -> np.ndarray:
    """Pairwise cosine similarity of flattened norm maps from the same layer.
    Exactly symmetric with a unit diagonal; an all-zero map scores 0 against
    everything else."""
    if not maps:
        raise ShapeError("cross_run_similarity requires at least one map")
    shape = maps[0].values.shape
    layer = maps[0].layer
    for m in maps[1:]:
        if m.values.shape != shape:
            raise ShapeError(f"norm map shapes differ: {shape} vs {m.values.shape}")
        if m.layer != layer:
            raise ShapeError(f"norm maps come from different layers: {layer} vs {m.layer}")
    flat = [m.values.reshape(-1).astype(np.float64) for m in maps]
    norms = [float(np.linalg.norm(v)) for v in flat]
    n = len(maps)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                s = 0.0
            else:
                s = float(flat[i] @ flat[j]) / (norms[i] * norms[j])
            sim[i, j] = s
            sim[j, i] = s
    return sim


def frequency_band_report(nm: NormMap, rope: RopeConfig) -> dict:
    """Join a norm map's dim columns with their rotation frequencies and
    report how much of the map's mass sits in the top-quartile (high
    frequency) and bottom-quartile (low frequency) bands. Descriptive only;
    nothing here is asserted."""
    if nm.head_dim != rope.head_dim:
        raise ShapeError(f"norm map head_dim {nm.head_dim} != rope head_dim {rope.head_dim}")
    freqs = np.array([dim_frequency(d, rope) for d in range(nm.head_dim)])
    high_cut = float(np.quantile(freqs, 0.75))
    low_cut = float(np.quantile(freqs, 0.25))
    col_mass = nm.values.sum(axis=0)
    total = float(col_mass.sum())
    high = float(col_mass[freqs >= high_cut].sum())
    low = float(col_mass[freqs <= low_cut].sum())
    return {
        "segment": nm.segment,
        "layer": nm.layer,
        "step": nm.step,
        "high_freq_cutoff": high_cut,
        "low_freq_cutoff": low_cut,
        "high_freq_fraction": high / total if total > 0 else 0.0,
        "low_freq_fraction": low / total if total > 0 else 0.0,
        "total_mass": total,
    }
