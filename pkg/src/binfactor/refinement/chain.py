# src/binfactor/refinement/chain.py
"""
Toy layer chains: the desk-scale stand-in for a transformer block.

A chain is an ordered tuple of dense or factorized-latent linear maps with an
optional ReLU between consecutive layers. Inputs are laid out as columns.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike

from ..balancing import BalancedLatents
from ..linalg import DenseMatrix, Vector, as_dense, sign_plus
from ..utils.exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    NONE = "none"
    RELU = "relu"


@dataclass(frozen=True, slots=True)
class DenseLayer:
    """Full-precision linear map y = W x."""

    W: DenseMatrix

    @property
    def in_dim(self) -> int:
        return int(self.W.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.W.shape[0])

    def apply(self, h: DenseMatrix) -> DenseMatrix:
        return np.asarray(self.W @ h, dtype=np.float64)


@dataclass(frozen=True, slots=True)
class FactorizedLatentLayer:
    """Latent factors plus scales; the forward pass uses their signs."""

    latent_U: DenseMatrix
    latent_V: DenseMatrix
    s1: Vector
    s2: Vector

    def __post_init__(self) -> None:
        n, r = self.latent_U.shape
        m, r_v = self.latent_V.shape
        if r != r_v or self.s1.shape != (n,) or self.s2.shape != (m,):
            raise DimensionMismatchError(
                "latent factors and scales do not agree",
                {"U": self.latent_U.shape, "V": self.latent_V.shape, "s1": self.s1.shape, "s2": self.s2.shape},
            )

    @classmethod
    def from_balanced(cls, latents: BalancedLatents) -> "FactorizedLatentLayer":
        return cls(latent_U=latents.latent_U, latent_V=latents.latent_V, s1=latents.s1, s2=latents.s2)

    @property
    def in_dim(self) -> int:
        return int(self.latent_V.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.latent_U.shape[0])

    @property
    def rank(self) -> int:
        return int(self.latent_U.shape[1])

    def apply(self, h: DenseMatrix) -> DenseMatrix:
        inner = sign_plus(self.latent_V).T @ (self.s2[:, None] * h)
        return np.asarray(self.s1[:, None] * (sign_plus(self.latent_U) @ inner), dtype=np.float64)


Layer = DenseLayer | FactorizedLatentLayer


@dataclass(frozen=True, slots=True)
class ToyChain:
    layers: tuple[Layer, ...]
    activation: Activation = Activation.NONE

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionMismatchError("a chain needs at least one layer")
        for index in range(1, len(self.layers)):
            previous, current = self.layers[index - 1], self.layers[index]
            if current.in_dim != previous.out_dim:
                raise DimensionMismatchError(
                    "consecutive layer dimensions do not compose",
                    {"layer": index, "expected_in": previous.out_dim, "actual_in": current.in_dim},
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def with_layer(self, index: int, layer: Layer) -> "ToyChain":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))

    def slice(self, start: int, stop: int) -> "ToyChain":
        return replace(self, layers=self.layers[start:stop])


def forward_chain(chain: ToyChain, X: ArrayLike) -> DenseMatrix:
    """Apply every layer to the columns of ``X``, with ReLU between layers when configured."""
    h = as_dense(X, "X")
    if h.shape[0] != chain.in_dim:
        raise DimensionMismatchError("input rows do not match the chain input", {"rows": h.shape[0], "in_dim": chain.in_dim})
    last = len(chain.layers) - 1
    for index, layer in enumerate(chain.layers):
        h = layer.apply(h)
        if index < last and chain.activation is Activation.RELU:
            h = np.maximum(h, 0.0)
    return h


def layer_inputs(chain: ToyChain, X: ArrayLike) -> list[DenseMatrix]:
    """Inputs seen by each layer (after the preceding activation), in order."""
    h = as_dense(X, "X")
    inputs: list[DenseMatrix] = []
    last = len(chain.layers) - 1
    for index, layer in enumerate(chain.layers):
        inputs.append(h)
        h = layer.apply(h)
        if index < last and chain.activation is Activation.RELU:
            h = np.maximum(h, 0.0)
    return inputs


def flip_ratio(latents_before: ArrayLike, latents_after: ArrayLike) -> float:
    """Fraction of entries whose sign (with sign(0) = +1) differs."""
    before = np.asarray(latents_before, dtype=np.float64)
    after = np.asarray(latents_after, dtype=np.float64)
    if before.shape != after.shape:
        raise DimensionMismatchError("flip_ratio needs equal shapes", {"before": before.shape, "after": after.shape})
    if before.size == 0:
        return 0.0
    return float(np.mean(sign_plus(before) != sign_plus(after)))
