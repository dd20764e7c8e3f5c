# src/binfactor/preconditioner.py
"""
Robust diagonal preconditioners built from calibration statistics.

Input-side diagonals come from per-channel RMS of the activations feeding a
layer; output-side diagonals come from output-gradient statistics when the
caller has them, otherwise identity. Raw RMS values are clipped at a
cumulative percentile threshold, shrunk toward their mean and floored.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .linalg import DenseMatrix, Vector, as_dense
from .utils.exceptions import DimensionMismatchError, EmptyStatsError, NonFiniteInputError

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 0.99
DEFAULT_GAMMA = 0.2
DEFAULT_EPS_FLOOR = 1e-8


@dataclass(frozen=True, slots=True)
class ChannelStats:
    """Running second moments per channel plus the cumulative clipping threshold."""

    channel_count: int
    sum_squares: Vector
    sample_count: int = 0
    tau: float = 0.0

    @classmethod
    def empty(cls, channel_count: int) -> "ChannelStats":
        if channel_count < 1:
            raise DimensionMismatchError("channel_count must be positive", {"channel_count": channel_count})
        return cls(channel_count=channel_count, sum_squares=np.zeros(channel_count))

    def rms(self) -> Vector:
        if self.sample_count == 0:
            raise EmptyStatsError("no samples accumulated", {"channel_count": self.channel_count})
        return np.asarray(np.sqrt(self.sum_squares / self.sample_count), dtype=np.float64)


@dataclass(frozen=True, slots=True)
class Preconditioner:
    """Immutable pair of clipped, shrunk diagonals."""

    diag_in: Vector
    diag_out: Vector
    gamma: float
    tau_max: float

    @classmethod
    def identity(cls, rows: int, cols: int) -> "Preconditioner":
        return cls(diag_in=np.ones(cols), diag_out=np.ones(rows), gamma=0.0, tau_max=1.0)


def accumulate_stats(stats: ChannelStats, batch: ArrayLike, percentile: float = DEFAULT_PERCENTILE) -> ChannelStats:
    """
    Fold a samples×channels batch into ``stats``.

    The threshold becomes ``max(tau, q)`` where ``q`` is the ``percentile``
    quantile of this batch's per-channel RMS values.
    """
    if not 0.0 < percentile < 1.0:
        raise ValueError(f"percentile must lie in (0, 1), got {percentile}")
    try:
        data = as_dense(batch, "batch")
    except NonFiniteInputError as e:
        raise NonFiniteInputError("calibration batch contains non-finite values", e.context)
    if data.shape[1] != stats.channel_count:
        raise DimensionMismatchError(
            "batch channel count does not match stats",
            {"batch_cols": data.shape[1], "channel_count": stats.channel_count},
        )

    batch_sq = np.sum(data * data, axis=0)
    batch_rms = np.sqrt(batch_sq / data.shape[0])
    q = float(np.quantile(batch_rms, percentile))
    return ChannelStats(
        channel_count=stats.channel_count,
        sum_squares=stats.sum_squares + batch_sq,
        sample_count=stats.sample_count + data.shape[0],
        tau=max(stats.tau, q),
    )


def merge_stats(first: ChannelStats, second: ChannelStats) -> ChannelStats:
    """Associative merge of independently filled stats: sums add, tau takes the max."""
    if first.channel_count != second.channel_count:
        raise DimensionMismatchError(
            "cannot merge stats of different widths",
            {"first": first.channel_count, "second": second.channel_count},
        )
    return ChannelStats(
        channel_count=first.channel_count,
        sum_squares=first.sum_squares + second.sum_squares,
        sample_count=first.sample_count + second.sample_count,
        tau=max(first.tau, second.tau),
    )


def _robust_diagonal(stats: ChannelStats, gamma: float, eps_floor: float) -> Vector:
    clipped = np.minimum(stats.rms(), stats.tau)
    shrunk = (1.0 - gamma) * clipped + gamma * float(np.mean(clipped))
    return np.asarray(np.maximum(shrunk, eps_floor), dtype=np.float64)


def build_preconditioner(
    in_stats: ChannelStats,
    out_stats: ChannelStats | None = None,
    gamma: float = DEFAULT_GAMMA,
    eps_floor: float = DEFAULT_EPS_FLOOR,
    out_channels: int | None = None,
) -> Preconditioner:
    """
    Build clipped and shrunk diagonals.

    Each raw entry is ``min(rms_j, tau)``; the vector is then blended toward its
    mean with weight ``gamma`` and floored at ``eps_floor``. When ``out_stats``
    is absent the output diagonal is all ones of length ``out_channels``
    (defaulting to one entry, for callers that only need the input side).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if eps_floor <= 0:
        raise ValueError(f"eps_floor must be positive, got {eps_floor}")
    if in_stats.sample_count == 0:
        raise EmptyStatsError("input statistics are empty", {"channel_count": in_stats.channel_count})

    diag_in = _robust_diagonal(in_stats, gamma, eps_floor)
    if out_stats is None:
        diag_out = np.ones(out_channels or 1)
        tau_max = max(in_stats.tau, 1.0)
    else:
        diag_out = _robust_diagonal(out_stats, gamma, eps_floor)
        tau_max = max(in_stats.tau, out_stats.tau)

    # Degenerate all-zero statistics leave only the floor.
    tau_max = max(tau_max, eps_floor)
    logger.debug(
        f"Preconditioner built: in={diag_in.size} out={diag_out.size} gamma={gamma} tau_max={tau_max:.4g}"
    )
    return Preconditioner(diag_in=diag_in, diag_out=diag_out, gamma=gamma, tau_max=tau_max)


def _check_shapes(W: DenseMatrix, P: Preconditioner) -> None:
    if W.shape != (P.diag_out.size, P.diag_in.size):
        raise DimensionMismatchError(
            "weight shape does not match preconditioner",
            {"weight": W.shape, "diag_out": P.diag_out.size, "diag_in": P.diag_in.size},
        )


def precondition_weight(W: ArrayLike, P: Preconditioner) -> DenseMatrix:
    """W̃ = D_out · W · D_in."""
    weight = as_dense(W, "W")
    _check_shapes(weight, P)
    return np.asarray(P.diag_out[:, None] * weight * P.diag_in[None, :], dtype=np.float64)


def unprecondition_weight(W_tilde: ArrayLike, P: Preconditioner) -> DenseMatrix:
    """Inverse of :func:`precondition_weight`."""
    weight = as_dense(W_tilde, "W_tilde")
    _check_shapes(weight, P)
    return np.asarray(weight / P.diag_out[:, None] / P.diag_in[None, :], dtype=np.float64)
