# src/binfactor/utils/exceptions.py
"""
Custom exceptions for the binfactor package.

Every error carries an optional ``context`` dictionary (shapes, offending
values, layer names) that is rendered into ``str(error)`` and logged by the CLI.
Errors fall in two families that map onto CLI exit codes: validation problems
with the caller's input (exit code 2) and numerical failures during
computation (exit code 3).
"""

from typing import Any


class BinFactorError(Exception):
    """Base class for all binfactor errors."""

    def __init__(self, message: str, context: dict[str, Any] | None = None):
        self.message = message
        self.context = context or {}
        super().__init__(message)

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class ValidationError(BinFactorError):
    """Raised when inputs violate a documented precondition."""

    exit_code = 2


class NumericalError(BinFactorError):
    """Raised when a numerical procedure cannot produce a valid result."""

    exit_code = 3


# --- validation family ---


class DimensionMismatchError(ValidationError):
    """Shapes of the operands do not compose."""


class NotSymmetricError(ValidationError):
    """A matrix expected to be symmetric is not."""


class NonFiniteInputError(ValidationError):
    """An input contains NaN or infinite values."""


class EmptyStatsError(ValidationError):
    """Channel statistics were built from zero samples."""


class RankTooLargeError(ValidationError):
    """Requested rank exceeds min(rows, cols) of the target."""


class InvalidRankError(ValidationError):
    """Rank must be a positive integer."""


class UnsupportedMethodError(ValidationError):
    """Unknown quantization method label."""


class InvalidSalientCountError(ValidationError):
    """Salient column count outside [0, min(50, m)]."""


class TargetTooSmallError(ValidationError):
    """Target bits-per-weight cannot be reached even at rank 1."""


class NonBinaryEntryError(ValidationError):
    """A sign matrix contains entries other than -1 and +1."""


class CorruptPaddingError(ValidationError):
    """Packed words carry non-zero bits beyond the declared column count."""


class NoTunableLayersError(ValidationError):
    """A tuning operation found nothing to tune."""


class FormatError(ValidationError):
    """A file does not follow the NQMX / NQPK / shape-config format."""


class ConfigFileError(ValidationError):
    """A config file has an unsupported suffix or does not hold a valid mapping."""


# --- numerical family ---


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization failed after every jitter attempt."""


class ZeroMatrixError(NumericalError):
    """An operation that needs a dominant direction received a zero matrix."""


class NonFiniteLossError(NumericalError):
    """Tuning diverged; ``checkpoint`` holds the last finite state."""

    def __init__(self, message: str, checkpoint: Any = None, context: dict[str, Any] | None = None):
        super().__init__(message, context)
        self.checkpoint = checkpoint


class VerificationError(NumericalError):
    """A packed model failed a consistency check."""


class LayerProcessingError(BinFactorError):
    """Wraps a module error with the name of the layer that triggered it."""

    def __init__(self, layer_name: str, cause: BinFactorError):
        super().__init__(f"Layer '{layer_name}' failed: {cause.message}", {"layer": layer_name, **cause.context})
        self.layer_name = layer_name
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
