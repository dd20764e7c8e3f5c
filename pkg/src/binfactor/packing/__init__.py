# src/binfactor/packing/__init__.py
"""Bit packing and packed inference."""

from .bits import FactorizedLayer, PackedBitMatrix, binarize, pack_signs, reconstruct_dense, unpack_signs
from .inference import gemm_packed, gemv_packed

__all__ = [
    "FactorizedLayer",
    "PackedBitMatrix",
    "binarize",
    "gemm_packed",
    "gemv_packed",
    "pack_signs",
    "reconstruct_dense",
    "unpack_signs",
]
