"""Unit tests for toy chains, their forward pass and the flip-ratio statistic."""

import numpy as np
import pytest

from binfactor.packing.bits import FactorizedLayer, reconstruct_dense
from binfactor.refinement.chain import (
    Activation,
    DenseLayer,
    FactorizedLatentLayer,
    ToyChain,
    flip_ratio,
    forward_chain,
    layer_inputs,
)
from binfactor.utils.exceptions import DimensionMismatchError


def _latent_layer(rng: np.random.Generator, n: int, m: int, r: int) -> FactorizedLatentLayer:
    return FactorizedLatentLayer(
        latent_U=rng.standard_normal((n, r)),
        latent_V=rng.standard_normal((m, r)),
        s1=rng.uniform(0.5, 1.5, n),
        s2=rng.uniform(0.5, 1.5, m),
    )


class TestForwardChain:
    """Forward pass of dense and factorized layers."""

    def test_identity_dense_layer(self, rng):
        # Arrange
        X = rng.standard_normal((4, 3))

        # Act & Assert
        np.testing.assert_array_equal(forward_chain(ToyChain(layers=(DenseLayer(np.eye(4)),)), X), X)

    def test_all_positive_rank1_layer_sums_inputs(self, rng):
        # Arrange
        layer = FactorizedLatentLayer(np.ones((3, 1)), np.ones((5, 1)), np.ones(3), np.ones(5))
        X = rng.standard_normal((5, 2))

        # Act
        Y = forward_chain(ToyChain(layers=(layer,)), X)

        # Assert
        np.testing.assert_allclose(Y, np.tile(X.sum(axis=0), (3, 1)), rtol=1e-14)

    def test_matches_sequential_dense_reconstruction(self, rng):
        # Arrange
        first = _latent_layer(rng, 6, 5, 3)
        second = _latent_layer(rng, 4, 6, 2)
        chain = ToyChain(layers=(first, second), activation=Activation.RELU)
        X = rng.standard_normal((5, 7))
        dense = [
            reconstruct_dense(FactorizedLayer.from_latents(layer.latent_U, layer.latent_V, layer.s1, layer.s2))
            for layer in (first, second)
        ]

        # Act
        Y = forward_chain(chain, X)

        # Assert
        expected = dense[1] @ np.maximum(dense[0] @ X, 0.0)
        assert np.linalg.norm(Y - expected) <= 1e-6 * np.linalg.norm(expected)

    def test_no_activation_after_last_layer(self):
        # Arrange
        chain = ToyChain(layers=(DenseLayer(np.eye(2)), DenseLayer(-np.eye(2))), activation=Activation.RELU)

        # Act
        Y = forward_chain(chain, np.array([[1.0], [2.0]]))

        # Assert
        np.testing.assert_array_equal(Y, [[-1.0], [-2.0]])

    def test_layer_inputs_follow_activation(self):
        # Arrange
        chain = ToyChain(layers=(DenseLayer(-np.eye(2)), DenseLayer(np.eye(2))), activation=Activation.RELU)

        # Act
        inputs = layer_inputs(chain, np.array([[1.0], [-3.0]]))

        # Assert
        np.testing.assert_array_equal(inputs[1], [[0.0], [3.0]])

    def test_non_composing_layers(self):
        with pytest.raises(DimensionMismatchError):
            ToyChain(layers=(DenseLayer(np.ones((3, 2))), DenseLayer(np.ones((2, 4)))))

    def test_input_rows_must_match(self):
        with pytest.raises(DimensionMismatchError):
            forward_chain(ToyChain(layers=(DenseLayer(np.eye(3)),)), np.ones((2, 1)))

    def test_slice_and_replace(self, rng):
        # Arrange
        chain = ToyChain(layers=(DenseLayer(np.eye(2)), DenseLayer(2 * np.eye(2)), DenseLayer(3 * np.eye(2))))

        # Act
        middle = chain.slice(1, 2)
        replaced = chain.with_layer(0, DenseLayer(5 * np.eye(2)))

        # Assert
        assert len(middle.layers) == 1 and middle.layers[0].W[0, 0] == 2.0
        assert replaced.layers[0].W[0, 0] == 5.0
        assert chain.layers[0].W[0, 0] == 1.0


class TestFlipRatio:
    """Fraction of sign changes between two latent matrices."""

    def test_identical(self, rng):
        M = rng.standard_normal((4, 4))
        assert flip_ratio(M, M) == 0.0

    def test_negation(self, rng):
        M = rng.standard_normal((4, 4))
        assert flip_ratio(M, -M) == 1.0

    def test_hand_count(self):
        assert flip_ratio(np.array([1.0, -1.0, 1.0, -1.0]), np.array([1.0, 1.0, 1.0, -1.0])) == 0.25

    def test_zero_counts_as_positive(self):
        assert flip_ratio(np.array([0.0, -0.0]), np.array([1.0, 2.0])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            flip_ratio(np.ones(3), np.ones(4))
