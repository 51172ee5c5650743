"""The four-line patch: reweight a token group's key embeddings around their
mean inside a host attention processor.

Splice it in after the host pipeline applies positional encoding to the keys
and before the joint attention dispatch. Keys outside the configured
[i_start, i_end) slice come back bit-identical; bias_scale = delta_scale = 1
returns the input tensor unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ShimConfig:
    """Token range plus the two guidance scales; loaded from the same JSON
    schema the reference harness writes."""

    i_start: int
    i_end: int
    bias_scale: float = 1.0
    delta_scale: float = 1.0

    def __post_init__(self):
        if not self.bias_scale > 0:
            raise ValueError(f"bias_scale must be > 0, got {self.bias_scale}")
        if self.delta_scale < 0:
            raise ValueError(f"delta_scale must be >= 0, got {self.delta_scale}")
        if not 0 <= self.i_start < self.i_end:
            raise ValueError(f"need 0 <= i_start < i_end, got [{self.i_start}, {self.i_end})")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ShimConfig":
        version = obj.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
        selector = obj.get("group_selector", "explicit_range")
        if selector != "explicit_range":
            raise ValueError(f"shim configs need an explicit token range, got group_selector={selector!r}")
        if obj.get("i_start") is None or obj.get("i_end") is None:
            raise ValueError("shim configs need i_start and i_end")
        return cls(
            i_start=int(obj["i_start"]),
            i_end=int(obj["i_end"]),
            bias_scale=float(obj["bias_scale"]),
            delta_scale=float(obj["delta_scale"]),
        )

    @classmethod
    def from_json_file(cls, path) -> "ShimConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def patch_keys(keys: torch.Tensor, cfg: ShimConfig) -> torch.Tensor:
    """Reweight keys[:, i_start:i_end] around the group mean:

        group_bias = keys[:, s:e].mean(dim=1, keepdim=True)
        keys[:, s:e] = bias_scale * group_bias + delta_scale * (keys[:, s:e] - group_bias)

    Expects position-encoded keys shaped [batch, seq, heads, head_dim]."""
    if keys.dim() != 4:
        raise ValueError(f"expected keys shaped [B, S, H, D], got {tuple(keys.shape)}")
    seq = keys.shape[1]
    if cfg.i_end > seq:
        raise IndexError(f"group range [{cfg.i_start}, {cfg.i_end}) outside sequence of length {seq}")
    if cfg.bias_scale == 1.0 and cfg.delta_scale == 1.0:
        return keys
    out = keys.clone()
    group = out[:, cfg.i_start : cfg.i_end]
    group_bias = group.mean(dim=1, keepdim=True)
    out[:, cfg.i_start : cfg.i_end] = cfg.bias_scale * group_bias + cfg.delta_scale * (group - group_bias)
    return out
