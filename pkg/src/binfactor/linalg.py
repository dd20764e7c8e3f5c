# src/binfactor/linalg.py
"""
Minimal dense linear algebra used by the factorization solver.

Everything here works on 64-bit numpy arrays. ``DenseMatrix`` is the universal
numeric carrier: a 2-D float64 array whose shape gives its row and column
counts. Only what the solver needs lives here: SPD solves with a stabilizing
jitter schedule, dominant singular pairs by power iteration and norms.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .utils.exceptions import (
    DimensionMismatchError,
    NonFiniteInputError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    ZeroMatrixError,
)

logger = logging.getLogger(__name__)

DenseMatrix = NDArray[np.float64]
Vector = NDArray[np.float64]

DEFAULT_JITTER_SCHEDULE: tuple[float, ...] = (1e-10, 1e-7, 1e-4)
SYMMETRY_TOLERANCE = 1e-9

# Fixed seed for the start vector of signed matrices keeps power iteration deterministic.
_START_SEED = 0


def as_dense(values: ArrayLike, name: str = "matrix") -> DenseMatrix:
    """Return ``values`` as a finite 2-D float64 array or raise."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D", {"name": name, "ndim": array.ndim})
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must have at least one row and column", {"shape": array.shape})
    if not np.all(np.isfinite(array)):
        raise NonFiniteInputError(f"{name} contains non-finite values", {"name": name})
    return array


def dense_from_values(rows: int, cols: int, values: Sequence[float] | ArrayLike) -> DenseMatrix:
    """Build a DenseMatrix from a row-major value sequence."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if rows < 1 or cols < 1 or flat.size != rows * cols:
        raise DimensionMismatchError(
            "value count does not match rows x cols", {"rows": rows, "cols": cols, "values": flat.size}
        )
    return as_dense(flat.reshape(rows, cols))


def sign_plus(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Entrywise sign with sign(0) = +1."""
    return np.where(values >= 0, 1.0, -1.0)


def relative_frobenius_error(reference: DenseMatrix, approximation: DenseMatrix) -> float:
    """‖reference − approximation‖_F / ‖reference‖_F (absolute error when the reference is zero)."""
    diff = float(np.linalg.norm(reference - approximation))
    scale = float(np.linalg.norm(reference))
    return diff / scale if scale > 0 else diff


@dataclass(frozen=True, slots=True)
class SingularPair:
    """Dominant singular triple returned by power iteration."""

    sigma: float
    left: Vector
    right: Vector
    converged: bool = True
    iterations: int = 0

    def outer(self) -> DenseMatrix:
        """Rank-1 matrix sigma · left · rightᵀ."""
        return self.sigma * np.outer(self.left, self.right)


def cholesky_solve(
    A: ArrayLike,
    B: ArrayLike,
    jitter_schedule: Sequence[float] = DEFAULT_JITTER_SCHEDULE,
) -> NDArray[np.float64]:
    """
    Solve ``A X = B`` for symmetric positive definite ``A``.

    When the factorization fails, ``delta * mean(diag(A))`` is added to the
    diagonal for each ``delta`` of ``jitter_schedule`` in turn.

    Raises:
        NotSymmetricError: ``A`` is not symmetric within 1e-9 relative.
        DimensionMismatchError: ``A`` is not square or ``B`` has the wrong row count.
        NotPositiveDefiniteError: every jitter attempt failed.
    """
    a = np.asarray(A, dtype=np.float64)
    b = np.asarray(B, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError("A must be square", {"shape": a.shape})
    if b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise DimensionMismatchError("rows(B) must equal rows(A)", {"A": a.shape, "B": b.shape})
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NonFiniteInputError("cholesky_solve received non-finite input")

    asym = float(np.linalg.norm(a - a.T))
    if asym > SYMMETRY_TOLERANCE * max(float(np.linalg.norm(a)), 1.0):
        raise NotSymmetricError("A is not symmetric", {"asymmetry": asym})

    diag_mean = float(np.mean(np.abs(np.diag(a)))) or 1.0
    attempts = [0.0, *jitter_schedule]
    for delta in attempts:
        system = a if delta == 0.0 else a + (delta * diag_mean) * np.eye(a.shape[0])
        try:
            factor = cho_factor(system, lower=True, check_finite=False)
        except LinAlgError:
            logger.debug(f"Cholesky failed with jitter {delta:g}; escalating")
            continue
        if delta > 0.0:
            logger.info(f"Cholesky succeeded after adding jitter {delta:g} x mean(diag)")
        return np.asarray(cho_solve(factor, b, check_finite=False), dtype=np.float64)

    raise NotPositiveDefiniteError(
        "matrix is not positive definite after all jitter attempts",
        {"size": a.shape[0], "jitter_schedule": tuple(jitter_schedule)},
    )


def _start_vector(M: DenseMatrix) -> Vector:
    cols = M.shape[1]
    if np.all(M >= 0):
        # Nonnegative start keeps every iterate nonnegative (Perron structure).
        start = np.ones(cols)
    else:
        start = np.random.default_rng(_START_SEED).standard_normal(cols)
    return np.asarray(start / np.linalg.norm(start), dtype=np.float64)


def top_singular_pair(M: ArrayLike, max_iters: int = 1000, tol: float = 1e-12) -> SingularPair:
    """
    Dominant singular triple of ``M`` by power iteration on ``MᵀM``.

    Stops when successive sigma estimates differ by less than ``tol``
    relatively, or after ``max_iters`` sweeps. Non-convergence is reported via
    the ``converged`` flag, never raised. For entrywise nonnegative ``M`` both
    returned vectors are entrywise nonnegative.

    Raises:
        ZeroMatrixError: ``M`` is identically zero.
    """
    matrix = as_dense(M, "M")
    if not np.any(matrix):
        raise ZeroMatrixError("top_singular_pair needs a nonzero matrix", {"shape": matrix.shape})

    right = _start_vector(matrix)
    sigma_prev = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        left = matrix @ right
        left_norm = float(np.linalg.norm(left))
        if left_norm == 0.0:
            # Start vector fell in the null space; any unit vector is as good.
            right = np.random.default_rng(_START_SEED + iterations).standard_normal(matrix.shape[1])
            right /= np.linalg.norm(right)
            continue
        left /= left_norm
        right = matrix.T @ left
        sigma = float(np.linalg.norm(right))
        right /= sigma
        if abs(sigma - sigma_prev) <= tol * sigma:
            converged = True
            break
        sigma_prev = sigma

    left = matrix @ right
    sigma = float(np.linalg.norm(left))
    left = left / sigma if sigma > 0 else left

    # Deterministic orientation: largest-magnitude entry of the right vector is positive.
    pivot = int(np.argmax(np.abs(right)))
    if right[pivot] < 0:
        left, right = -left, -right

    if not converged:
        logger.debug(f"Power iteration stopped at max_iters={max_iters} without meeting tol={tol:g}")
    return SingularPair(sigma=sigma, left=left, right=right, converged=converged, iterations=iterations)


def top_singular_triplets(M: ArrayLike, rank: int, max_iters: int = 1000, tol: float = 1e-12) -> list[SingularPair]:
    """Leading ``rank`` singular triples by deflated power iteration."""
    residual = as_dense(M, "M").copy()
    pairs: list[SingularPair] = []
    for _ in range(rank):
        if not np.any(residual):
            break
        pair = top_singular_pair(residual, max_iters=max_iters, tol=tol)
        pairs.append(pair)
        residual = residual - pair.outer()
    return pairs


def spectral_norm_estimate(M: ArrayLike, max_iters: int = 200) -> float:
    """σ_max(M) by power iteration; 0 for the zero matrix."""
    matrix = np.asarray(M, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionMismatchError("spectral_norm_estimate expects a 2-D matrix", {"ndim": matrix.ndim})
    if not np.any(matrix):
        return 0.0
    return top_singular_pair(matrix, max_iters=max_iters, tol=1e-12).sigma
