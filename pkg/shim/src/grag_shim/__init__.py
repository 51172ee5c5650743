"""Group-relative key reweighting as a torch patch, plus the conformance
runner that certifies it against reference golden bundles."""

from .conformance import CaseResult, ConformanceReport, run_conformance
from .patch import ShimConfig, patch_keys

__version__ = "0.1.0"

__all__ = [
    "CaseResult",
    "ConformanceReport",
    "ShimConfig",
    "patch_keys",
    "run_conformance",
]
