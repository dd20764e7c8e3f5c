# src/binfactor/packing/bits.py
"""
Sign binarization and 32-bit word packing.

Bit ``b`` of word ``w`` in a row encodes column ``32*w + b`` (LSB-first);
bit 1 is +1, bit 0 is -1, and padding bits past the last column are 0.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..balancing import BalancedLatents
from ..linalg import DenseMatrix, Vector, as_dense, sign_plus
from ..utils.exceptions import CorruptPaddingError, DimensionMismatchError, NonBinaryEntryError, ValidationError

logger = logging.getLogger(__name__)

WORD_BITS = 32
SCALE_BITS = 16
_BIT_POSITIONS = np.arange(WORD_BITS, dtype=np.uint32)


def words_per_row(cols: int) -> int:
    return -(-cols // WORD_BITS)


@dataclass(frozen=True, slots=True)
class PackedBitMatrix:
    rows: int
    cols: int
    words: NDArray[np.uint32]

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise DimensionMismatchError("packed matrix needs positive dimensions", {"rows": self.rows, "cols": self.cols})
        expected = (self.rows, words_per_row(self.cols))
        if self.words.shape != expected or self.words.dtype != np.uint32:
            raise DimensionMismatchError(
                "packed words have the wrong layout",
                {"expected": expected, "actual": self.words.shape, "dtype": str(self.words.dtype)},
            )

    @property
    def padding_mask(self) -> np.uint32:
        """Mask of the padding bits in the last word of each row."""
        used = self.cols % WORD_BITS
        if used == 0:
            return np.uint32(0)
        return np.uint32((0xFFFFFFFF << used) & 0xFFFFFFFF)


def binarize(latent: ArrayLike) -> DenseMatrix:
    """Entrywise sign with sign(0) = +1."""
    return sign_plus(as_dense(latent, "latent"))


def pack_signs(signs: ArrayLike) -> PackedBitMatrix:
    values = as_dense(signs, "signs")
    if not np.all((values == 1.0) | (values == -1.0)):
        bad = np.argwhere((values != 1.0) & (values != -1.0))[0]
        raise NonBinaryEntryError("sign matrix has entries other than +1/-1", {"row": int(bad[0]), "col": int(bad[1])})

    rows, cols = values.shape
    n_words = words_per_row(cols)
    bits = np.zeros((rows, n_words * WORD_BITS), dtype=np.uint32)
    bits[:, :cols] = values > 0
    shifted = bits.reshape(rows, n_words, WORD_BITS) << _BIT_POSITIONS
    words = np.bitwise_or.reduce(shifted, axis=2).astype(np.uint32)
    return PackedBitMatrix(rows=rows, cols=cols, words=words)


def unpack_signs(packed: PackedBitMatrix) -> DenseMatrix:
    mask = packed.padding_mask
    if mask and np.any(packed.words[:, -1] & mask):
        row = int(np.argmax((packed.words[:, -1] & mask) != 0))
        raise CorruptPaddingError("padding bits are set", {"row": row, "cols": packed.cols})
    bits = (packed.words[:, :, None] >> _BIT_POSITIONS) & np.uint32(1)
    flat = bits.reshape(packed.rows, -1)[:, : packed.cols]
    return np.where(flat == 1, 1.0, -1.0)


@dataclass(frozen=True, slots=True)
class FactorizedLayer:
    """Two packed sign factors plus their scale vectors: Ŵ = s1 ⊙ (U Vᵀ) ⊙ s2ᵀ."""

    U_packed: PackedBitMatrix
    V_packed: PackedBitMatrix
    s1: Vector
    s2: Vector

    def __post_init__(self) -> None:
        if self.U_packed.cols != self.V_packed.cols:
            raise DimensionMismatchError(
                "U and V ranks differ", {"U_rank": self.U_packed.cols, "V_rank": self.V_packed.cols}
            )
        if self.s1.shape != (self.U_packed.rows,) or self.s2.shape != (self.V_packed.rows,):
            raise DimensionMismatchError(
                "scale lengths do not match packed factors",
                {"n": self.U_packed.rows, "m": self.V_packed.rows, "s1": self.s1.shape, "s2": self.s2.shape},
            )
        for name, scale in (("s1", self.s1), ("s2", self.s2)):
            if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
                raise ValidationError(f"{name} must be finite and positive", {"min": float(np.min(scale))})

    @classmethod
    def from_latents(cls, latent_U: ArrayLike, latent_V: ArrayLike, s1: ArrayLike, s2: ArrayLike) -> "FactorizedLayer":
        return cls(
            U_packed=pack_signs(binarize(latent_U)),
            V_packed=pack_signs(binarize(latent_V)),
            s1=np.asarray(s1, dtype=np.float64).copy(),
            s2=np.asarray(s2, dtype=np.float64).copy(),
        )

    @classmethod
    def from_balanced(cls, latents: BalancedLatents) -> "FactorizedLayer":
        return cls.from_latents(latents.latent_U, latents.latent_V, latents.s1, latents.s2)

    @property
    def n(self) -> int:
        return self.U_packed.rows

    @property
    def m(self) -> int:
        return self.V_packed.rows

    @property
    def r(self) -> int:
        return self.U_packed.cols

    @property
    def payload_bits(self) -> int:
        """Accounted size: one bit per sign plus 16 bits per scale."""
        return self.r * (self.n + self.m) + SCALE_BITS * (self.n + self.m)

    @property
    def stored_bits(self) -> int:
        """Size on disk, including word padding."""
        return WORD_BITS * (self.U_packed.words.size + self.V_packed.words.size) + SCALE_BITS * (self.n + self.m)


def reconstruct_dense(layer: FactorizedLayer) -> DenseMatrix:
    U = unpack_signs(layer.U_packed)
    V = unpack_signs(layer.V_packed)
    return np.asarray(layer.s1[:, None] * (U @ V.T) * layer.s2[None, :], dtype=np.float64)
