# src/binfactor/accounting/__init__.py
"""Storage accounting for binary weight formats."""

from .bpw import (
    BaselineParams,
    BpwReport,
    Method,
    RankPolicy,
    bpw_baseline,
    bpw_binfactor,
    bpw_dbf,
    model_report,
    rank_for_target_bpw,
)
from .shapes import LayerShape, ModelShape, load_shipped_shape

__all__ = [
    "BaselineParams",
    "BpwReport",
    "LayerShape",
    "Method",
    "ModelShape",
    "RankPolicy",
    "bpw_baseline",
    "bpw_binfactor",
    "bpw_dbf",
    "load_shipped_shape",
    "model_report",
    "rank_for_target_bpw",
]
