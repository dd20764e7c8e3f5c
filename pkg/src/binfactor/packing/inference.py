# src/binfactor/packing/inference.py
"""
Two-stage packed products without materializing the dense weight.

Stage one contracts the scaled input with V word by word (t = Vᵀ(s2 ⊙ x)),
stage two expands t through U word by word and applies s1 to the
accumulated result. Signs are unpacked from each word with shift-and-mask as
they are needed. GEMV is the batch-of-one case of the same kernel, so both
paths round identically. Accumulation defaults to 64 bits and results are
returned as 32-bit reals unless 64-bit output is requested.
"""

import logging
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..linalg import DenseMatrix, Vector
from ..utils.exceptions import DimensionMismatchError, NonFiniteInputError
from .bits import WORD_BITS, FactorizedLayer, PackedBitMatrix

logger = logging.getLogger(__name__)

Precision = Literal[32, 64]

_BIT_POSITIONS = np.arange(WORD_BITS, dtype=np.uint32)
_BATCH_BLOCK = 64


def _word_signs(packed: PackedBitMatrix, word: int, dtype: type[np.floating]) -> NDArray[np.floating]:
    """rows x bits sign block for one word column, trimmed to real columns."""
    width = min(WORD_BITS, packed.cols - word * WORD_BITS)
    bits = (packed.words[:, word, None] >> _BIT_POSITIONS[:width]) & np.uint32(1)
    return (2.0 * bits - 1.0).astype(dtype)


def _kernel(layer: FactorizedLayer, Xt: NDArray[np.floating], dtype: type[np.floating]) -> NDArray[np.floating]:
    """Activations as rows (b x m) in, outputs as rows (b x n) out."""
    b = Xt.shape[0]
    Zt = np.ascontiguousarray(Xt * layer.s2.astype(dtype)[None, :], dtype=dtype)

    T = np.empty((b, layer.r), dtype=dtype)
    for w in range(layer.V_packed.words.shape[1]):
        S = np.ascontiguousarray(_word_signs(layer.V_packed, w, dtype).T)
        lo = w * WORD_BITS
        T[:, lo : lo + S.shape[0]] = (Zt[:, None, :] * S[None, :, :]).sum(axis=2)

    acc = np.zeros((b, layer.n), dtype=dtype)
    for w in range(layer.U_packed.words.shape[1]):
        S = _word_signs(layer.U_packed, w, dtype)
        lo = w * WORD_BITS
        block = np.ascontiguousarray(T[:, lo : lo + S.shape[1]])
        acc += (block[:, None, :] * S[None, :, :]).sum(axis=2)

    return acc * layer.s1.astype(dtype)[None, :]


def _dtype(precision: Precision) -> type[np.floating]:
    if precision == 64:
        return np.float64
    if precision == 32:
        return np.float32
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def gemv_packed(
    layer: FactorizedLayer, x: ArrayLike, precision: Precision = 64, output_precision: Precision = 32
) -> Vector:
    """
    y = s1 ⊙ (U (Vᵀ (s2 ⊙ x))).

    Accumulates at ``precision`` bits and returns ``output_precision`` reals;
    ask for 64-bit output to keep the full accumulated result.
    """
    dtype = _dtype(precision)
    out_dtype = _dtype(output_precision)
    vec = np.asarray(x, dtype=np.float64)
    if vec.shape != (layer.m,):
        raise DimensionMismatchError("input vector length must equal m", {"length": vec.shape, "m": layer.m})
    if not np.all(np.isfinite(vec)):
        raise NonFiniteInputError("input vector contains non-finite values")
    return _kernel(layer, vec[None, :].astype(dtype), dtype)[0].astype(out_dtype)


def gemm_packed(
    layer: FactorizedLayer, X: ArrayLike, precision: Precision = 64, output_precision: Precision = 32
) -> DenseMatrix:
    """Column-batched packed product; each column matches :func:`gemv_packed` exactly."""
    dtype = _dtype(precision)
    out_dtype = _dtype(output_precision)
    inputs = np.asarray(X, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] != layer.m:
        raise DimensionMismatchError("input rows must equal m", {"shape": inputs.shape, "m": layer.m})
    if not np.all(np.isfinite(inputs)):
        raise NonFiniteInputError("input batch contains non-finite values")

    Xt = np.ascontiguousarray(inputs.T, dtype=dtype)
    out = np.empty((Xt.shape[0], layer.n), dtype=dtype)
    for start in range(0, Xt.shape[0], _BATCH_BLOCK):
        out[start : start + _BATCH_BLOCK] = _kernel(layer, Xt[start : start + _BATCH_BLOCK], dtype)
    return np.ascontiguousarray(out.T, dtype=out_dtype)
