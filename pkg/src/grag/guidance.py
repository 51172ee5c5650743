"""Group-relative reweighting of key embeddings.

A contiguous token group's keys are split into their shared mean (the group
bias) and per-token deviations; the guided key is

    k_hat = bias_scale * k_bias + delta_scale * (k - k_bias)

bias_scale (> 0) scales the group's collective pull on the output: above 1 it
enhances the influence of the whole group, below 1 it suppresses it.
delta_scale (>= 0) scales how sharply individual tokens stand out from the
group: above 1 concentrates attention on token-specific content, below 1
diffuses it, and 0 collapses every group key onto the scaled bias. Both equal
to 1 is the exact identity.

The reweighting runs on position-encoded keys: rotate first, then reweight.
The group mean is therefore taken over rotated keys; reordering these steps
changes the semantics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .attention import RopeConfig, SegmentLayout, apply_rope, joint_attention, token_positions
from .errors import ConfigError, ShapeError
from .numerics import Tensor

CONFIG_SCHEMA_VERSION = 1


class GroupSelector(str, Enum):
    """How the guided token group is chosen: one of the layout's segments, or
    an explicit half-open index range."""

    SOURCE_TOKENS = "source_tokens"
    TEXT_TOKENS = "text_tokens"
    EXPLICIT_RANGE = "explicit_range"


@dataclass(frozen=True)
class GragConfig:
    """Guidance parameters: the group token range, the two scales, and which
    layers receive guidance (empty target_layers = all layers)."""

    bias_scale: float = 1.0
    delta_scale: float = 1.0
    i_start: int | None = None
    i_end: int | None = None
    group_selector: GroupSelector = GroupSelector.EXPLICIT_RANGE
    target_layers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.bias_scale > 0:
            raise ConfigError(f"bias_scale must be > 0, got {self.bias_scale}")
        if self.delta_scale < 0:
            raise ConfigError(f"delta_scale must be >= 0, got {self.delta_scale}")
        object.__setattr__(self, "group_selector", GroupSelector(self.group_selector))
        object.__setattr__(self, "target_layers", frozenset(int(i) for i in self.target_layers))
        if self.group_selector is GroupSelector.EXPLICIT_RANGE:
            if self.i_start is None or self.i_end is None:
                raise ConfigError("explicit_range requires i_start and i_end")
            if not (0 <= self.i_start < self.i_end):
                raise ConfigError(f"need 0 <= i_start < i_end, got [{self.i_start}, {self.i_end})")

    def applies_to_layer(self, layer: int) -> bool:
        return not self.target_layers or layer in self.target_layers

    def to_json_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "bias_scale": self.bias_scale,
            "delta_scale": self.delta_scale,
            "i_start": self.i_start,
            "i_end": self.i_end,
            "group_selector": self.group_selector.value,
            "target_layers": sorted(self.target_layers),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GragConfig":
        version = obj.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
        return cls(
            bias_scale=float(obj["bias_scale"]),
            delta_scale=float(obj["delta_scale"]),
            i_start=None if obj.get("i_start") is None else int(obj["i_start"]),
            i_end=None if obj.get("i_end") is None else int(obj["i_end"]),
            group_selector=GroupSelector(obj.get("group_selector", "explicit_range")),
            target_layers=frozenset(obj.get("target_layers", [])),
        )

    @classmethod
    def from_json_file(cls, path) -> "GragConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def resolve_group_range(cfg: GragConfig, seq_len: int, layout: SegmentLayout | None = None) -> tuple[int, int]:
    """The concrete [start, end) token range the config selects, validated
    against the actual sequence length."""
    if cfg.group_selector is GroupSelector.EXPLICIT_RANGE:
        start, end = cfg.i_start, cfg.i_end
    else:
        if layout is None:
            raise ConfigError(f"group_selector {cfg.group_selector.value} requires a SegmentLayout")
        if layout.total != seq_len:
            raise ShapeError(f"layout total {layout.total} != sequence length {seq_len}")
        start, end = layout.source_range if cfg.group_selector is GroupSelector.SOURCE_TOKENS else layout.text_range
    if not (0 <= start < end <= seq_len):
        raise ConfigError(f"group range [{start}, {end}) invalid for sequence length {seq_len}")
    return start, end


def group_bias(k_group: Tensor) -> Tensor:
    """Arithmetic mean of the group's keys over the token axis:
    [B, N, H, D] -> [B, 1, H, D]."""
    if k_group.ndim != 4:
        raise ShapeError(f"group_bias expects [B, N, H, D], got {k_group.shape}")
    return Tensor._wrap(k_group.array.mean(axis=1, keepdims=True))


def apply_grag(k: Tensor, cfg: GragConfig, layout: SegmentLayout | None = None) -> Tensor:
    """Reweight the selected group's keys around their mean; all other tokens
    are returned bit-identical. bias_scale = delta_scale = 1 returns the input
    unchanged (exact identity, short-circuited)."""
    if k.ndim != 4:
        raise ShapeError(f"apply_grag expects [B, S, H, D], got {k.shape}")
    start, end = resolve_group_range(cfg, k.shape[1], layout)
    if cfg.bias_scale == 1.0 and cfg.delta_scale == 1.0:
        return k
    out = k.array.copy()
    group = out[:, start:end]
    bias = group.mean(axis=1, keepdims=True)
    out[:, start:end] = cfg.bias_scale * bias + cfg.delta_scale * (group - bias)
    return Tensor._wrap(out)


def grag_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    layout: SegmentLayout,
    rope: RopeConfig,
    cfg: GragConfig,
    positions: Sequence[int] | np.ndarray | None = None,
) -> Tensor:
    """Guided joint attention: rotate Q and K, reweight the guided group's
    keys, then run joint attention. With bias_scale = delta_scale = 1 the
    output is bit-identical to the unguided pass over the rotated tensors."""
    if positions is None:
        positions = token_positions(layout)
    q_rot = apply_rope(q, positions, rope)
    k_rot = apply_rope(k, positions, rope)
    k_hat = apply_grag(k_rot, cfg, layout)
    return joint_attention(q_rot, k_hat, v, layout)
