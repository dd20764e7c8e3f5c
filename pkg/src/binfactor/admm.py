# src/binfactor/admm.py
"""
Latent binary ADMM.

Finds continuous factors ``U`` (n×r) and ``V`` (m×r) with ``UVᵀ ≈ W`` while
pulling each factor toward the set of sign-structured matrices whose magnitude
is rank one (the image of :func:`svid`). Each sweep projects ``X + L`` onto that
set, solves the two ridge-regularized least-squares subproblems by Cholesky,
then takes a scaled dual ascent step. The augmented Lagrangian is recorded after
every sweep so callers can audit descent.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, Field, model_validator

from .linalg import (
    DEFAULT_JITTER_SCHEDULE,
    DenseMatrix,
    as_dense,
    cholesky_solve,
    sign_plus,
    spectral_norm_estimate,
    top_singular_pair,
    top_singular_triplets,
)
from .utils.exceptions import DimensionMismatchError, RankTooLargeError, ZeroMatrixError

logger = logging.getLogger(__name__)


class AdmmConfig(BaseModel):
    """Solver knobs. Penalty endpoints left unset are derived from the target."""

    rank: int = Field(gt=0, description="Factorization rank r")
    max_iters: int = Field(default=400, gt=0, description="Maximum number of sweeps K")
    rho_start: float | None = Field(default=None, gt=0, description="Penalty at the first sweep")
    rho_end: float | None = Field(default=None, gt=0, description="Penalty at the last sweep")
    ridge: float = Field(default=1e-4, ge=0, description="Ridge weight λ")
    tol: float = Field(default=1e-4, gt=0, description="Primal residual tolerance ε")
    seed: int = Field(default=0, description="Seed for padding rank-deficient initializations")
    normalize_factors: bool = Field(
        default=True, description="Rescale the fixed factor to unit Frobenius norm before each solve"
    )
    jitter_schedule: tuple[float, ...] = Field(default=DEFAULT_JITTER_SCHEDULE)
    svid_max_iters: int = Field(default=1000, gt=0)
    svid_tol: float = Field(default=1e-12, gt=0)

    @model_validator(mode="after")
    def _check_rho_order(self) -> "AdmmConfig":
        if self.rho_start is not None and self.rho_end is not None and self.rho_end < self.rho_start:
            raise ValueError(f"rho_end ({self.rho_end}) must be >= rho_start ({self.rho_start})")
        return self

    def resolve_rho(self, target: DenseMatrix) -> tuple[float, float]:
        """Penalty endpoints, defaulting to 1e-2·mean(W²) and 100× that."""
        scale = float(np.sum(target * target)) / target.size
        start = self.rho_start if self.rho_start is not None else max(1e-2 * scale, np.finfo(float).tiny)
        end = self.rho_end if self.rho_end is not None else max(100.0 * start, start)
        return start, end

    def rho_at(self, sweep: int, start: float, end: float) -> float:
        """Linear schedule over sweeps 1..max_iters."""
        if self.max_iters == 1:
            return start
        frac = (sweep - 1) / (self.max_iters - 1)
        return start + (end - start) * frac


@dataclass(slots=True)
class AdmmState:
    """Mutable solver state. Duals are stored scaled (L = Y/ρ)."""

    U: DenseMatrix
    V: DenseMatrix
    Z_U: DenseMatrix
    Z_V: DenseMatrix
    L_U: DenseMatrix
    L_V: DenseMatrix
    rho: float
    iteration: int = 0
    lagrangian_trace: list[float] = field(default_factory=list)
    primal_residual: float = float("inf")
    converged: bool = False

    def rescale_duals(self, new_rho: float) -> None:
        """Keep Y = ρL continuous across a penalty change."""
        ratio = self.rho / new_rho
        self.L_U *= ratio
        self.L_V *= ratio
        self.rho = new_rho


class AdmmResult(NamedTuple):
    state: AdmmState
    P_U: DenseMatrix
    P_V: DenseMatrix


def svid(P: ArrayLike, max_iters: int = 1000, tol: float = 1e-12) -> DenseMatrix:
    """sign(P) ⊙ (a·bᵀ) where a·bᵀ is the best rank-1 fit of |P|."""
    matrix = as_dense(P, "P")
    magnitude = np.abs(matrix)
    if not np.any(magnitude):
        raise ZeroMatrixError("svid of a zero matrix is undefined", {"shape": matrix.shape})
    pair = top_singular_pair(magnitude, max_iters=max_iters, tol=tol)
    root = np.sqrt(pair.sigma)
    return np.asarray(sign_plus(matrix) * np.outer(root * pair.left, root * pair.right), dtype=np.float64)


def admm_factor_solve(
    target: ArrayLike,
    fixed: ArrayLike,
    Z: ArrayLike,
    L: ArrayLike,
    rho: float,
    ridge: float,
    jitter_schedule: tuple[float, ...] = DEFAULT_JITTER_SCHEDULE,
) -> DenseMatrix:
    """
    Minimize ½‖target − X·fixedᵀ‖² + λ/2‖X‖² + ρ/2‖X − Z + L‖² over X.

    Solves ``(fixedᵀfixed + (ρ+λ)I) Xᵀ = fixedᵀ targetᵀ + ρ(Z − L)ᵀ``.
    """
    t = np.asarray(target, dtype=np.float64)
    f = np.asarray(fixed, dtype=np.float64)
    z = np.asarray(Z, dtype=np.float64)
    lam = np.asarray(L, dtype=np.float64)
    if t.ndim != 2 or f.ndim != 2 or f.shape[0] != t.shape[1]:
        raise DimensionMismatchError("fixed factor does not match target columns", {"target": t.shape, "fixed": f.shape})
    expected = (t.shape[0], f.shape[1])
    if z.shape != expected or lam.shape != expected:
        raise DimensionMismatchError(
            "proxy/dual shapes do not match the solved factor", {"expected": expected, "Z": z.shape, "L": lam.shape}
        )

    r = f.shape[1]
    system = f.T @ f + (rho + ridge) * np.eye(r)
    rhs = f.T @ t.T + rho * (z - lam).T
    return np.asarray(cholesky_solve(system, rhs, jitter_schedule).T, dtype=np.float64)


def augmented_lagrangian(state: AdmmState, target: ArrayLike, ridge: float) -> float:
    """Reconstruction + ridge + consensus terms, with scaled duals."""
    W = np.asarray(target, dtype=np.float64)
    if W.shape != (state.U.shape[0], state.V.shape[0]) or state.U.shape[1] != state.V.shape[1]:
        raise DimensionMismatchError(
            "state shapes are inconsistent with the target", {"target": W.shape, "U": state.U.shape, "V": state.V.shape}
        )
    residual = W - state.U @ state.V.T
    value = 0.5 * float(np.sum(residual * residual))
    value += 0.5 * ridge * (float(np.sum(state.U * state.U)) + float(np.sum(state.V * state.V)))
    rho = state.rho
    for X, Z, L in ((state.U, state.Z_U, state.L_U), (state.V, state.Z_V, state.L_V)):
        gap = X - Z
        value += rho * float(np.sum(L * gap)) + 0.5 * rho * float(np.sum(gap * gap))
    return value


def lipschitz_bound(target: ArrayLike, U: ArrayLike, V: ArrayLike, ridge: float = 0.0) -> float:
    """Upper bound on the gradient Lipschitz constant of ½‖W − UVᵀ‖² + λ/2(‖U‖² + ‖V‖²) near (U, V)."""
    su = spectral_norm_estimate(U)
    sv = spectral_norm_estimate(V)
    return max(su, sv) ** 2 + spectral_norm_estimate(target) + 2.0 * su * sv + ridge


def _relative_gap(X: DenseMatrix, Z: DenseMatrix) -> float:
    norm = float(np.linalg.norm(X))
    gap = float(np.linalg.norm(X - Z))
    return gap / norm if norm > 0 else gap


def _balanced_svd_init(W: DenseMatrix, config: AdmmConfig) -> tuple[DenseMatrix, DenseMatrix]:
    n, m = W.shape
    r = config.rank
    U = np.zeros((n, r))
    V = np.zeros((m, r))
    pairs = top_singular_triplets(W, r, max_iters=config.svid_max_iters, tol=config.svid_tol)
    for k, pair in enumerate(pairs):
        root = np.sqrt(pair.sigma)
        U[:, k] = root * pair.left
        V[:, k] = root * pair.right
    if len(pairs) < r:
        # Rank-deficient target: pad with small noise so every column stays alive.
        rng = np.random.default_rng(config.seed)
        scale = 1e-3 * np.sqrt(pairs[-1].sigma if pairs else float(np.linalg.norm(W)))
        U[:, len(pairs) :] = scale * rng.standard_normal((n, r - len(pairs)))
        V[:, len(pairs) :] = scale * rng.standard_normal((m, r - len(pairs)))
        logger.debug(f"Target has only {len(pairs)} nonzero directions; padded to rank {r}")
    return U, V


def _normalize_pair(
    fixed: DenseMatrix, fixed_z: DenseMatrix, fixed_l: DenseMatrix,
    partner: DenseMatrix, partner_z: DenseMatrix, partner_l: DenseMatrix,
) -> None:
    scale = float(np.linalg.norm(fixed))
    if scale == 0.0:
        return
    for array in (fixed, fixed_z, fixed_l):
        array /= scale
    for array in (partner, partner_z, partner_l):
        array *= scale


def admm_factorize(target: ArrayLike, config: AdmmConfig) -> AdmmResult:
    """
    Run latent binary ADMM on ``target``.

    Returns the final state together with the consensus variables
    ``P_U = U + L_U`` and ``P_V = V + L_V``.

    Raises:
        RankTooLargeError: ``config.rank`` exceeds min(rows, cols).
        ZeroMatrixError: the target is identically zero.
    """
    W = as_dense(target, "target")
    n, m = W.shape
    if config.rank > min(n, m):
        raise RankTooLargeError("rank exceeds min(rows, cols)", {"rank": config.rank, "shape": W.shape})
    if not np.any(W):
        raise ZeroMatrixError("cannot factorize a zero target", {"shape": W.shape})

    rho_start, rho_end = config.resolve_rho(W)
    U, V = _balanced_svd_init(W, config)
    Z_U = svid(U, config.svid_max_iters, config.svid_tol)
    Z_V = svid(V, config.svid_max_iters, config.svid_tol)
    state = AdmmState(U=U, V=V, Z_U=Z_U, Z_V=Z_V, L_U=np.zeros_like(U), L_V=np.zeros_like(V), rho=rho_start)
    state.lagrangian_trace.append(augmented_lagrangian(state, W, config.ridge))
    state.primal_residual = max(_relative_gap(U, Z_U), _relative_gap(V, Z_V))

    Wt = np.ascontiguousarray(W.T)
    for sweep in range(1, config.max_iters + 1):
        if state.primal_residual < config.tol:
            state.converged = True
            break

        rho = config.rho_at(sweep, rho_start, rho_end)
        if rho != state.rho:
            state.rescale_duals(rho)

        state.Z_U = svid(state.U + state.L_U, config.svid_max_iters, config.svid_tol)
        state.Z_V = svid(state.V + state.L_V, config.svid_max_iters, config.svid_tol)

        if config.normalize_factors:
            _normalize_pair(state.V, state.Z_V, state.L_V, state.U, state.Z_U, state.L_U)
        state.U = admm_factor_solve(W, state.V, state.Z_U, state.L_U, rho, config.ridge, config.jitter_schedule)

        if config.normalize_factors:
            _normalize_pair(state.U, state.Z_U, state.L_U, state.V, state.Z_V, state.L_V)
        state.V = admm_factor_solve(Wt, state.U, state.Z_V, state.L_V, rho, config.ridge, config.jitter_schedule)

        state.L_U += state.U - state.Z_U
        state.L_V += state.V - state.Z_V

        state.iteration = sweep
        state.primal_residual = max(_relative_gap(state.U, state.Z_U), _relative_gap(state.V, state.Z_V))
        state.lagrangian_trace.append(augmented_lagrangian(state, W, config.ridge))
        if sweep % 50 == 0:
            logger.debug(
                f"ADMM sweep {sweep}: rho={rho:.3g} residual={state.primal_residual:.3e} "
                f"lagrangian={state.lagrangian_trace[-1]:.6e}"
            )
    else:
        state.converged = state.primal_residual < config.tol

    logger.debug(
        f"ADMM finished after {state.iteration} sweeps (converged={state.converged}, "
        f"residual={state.primal_residual:.3e})"
    )
    return AdmmResult(state=state, P_U=state.U + state.L_U, P_V=state.V + state.L_V)
