# src/binfactor/balancing.py
"""Magnitude balancing and scale extraction after ADMM."""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .linalg import DenseMatrix, Vector, as_dense
from .preconditioner import Preconditioner
from .utils.exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)

DEFAULT_SCALE_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class BalancedLatents:
    """Latent factors with equal Frobenius norms plus their row-magnitude scales."""

    latent_U: DenseMatrix
    latent_V: DenseMatrix
    s1: Vector
    s2: Vector
    eta: float

    @property
    def rank(self) -> int:
        return int(self.latent_U.shape[1])


def balance_and_extract_scales(
    P_U: ArrayLike,
    P_V: ArrayLike,
    P: Preconditioner,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> BalancedLatents:
    """
    Undo preconditioning, equalize factor norms and read off scales.

    Û = D_out⁻¹ P_U, V̂ = D_in⁻¹ P_V, η = sqrt(‖V̂‖/‖Û‖) (1 when either norm is
    zero), latents ηÛ and V̂/η, and s1, s2 the mean absolute value of each
    latent row, floored at ``scale_floor``.
    """
    pu = as_dense(P_U, "P_U")
    pv = as_dense(P_V, "P_V")
    if pu.shape[0] != P.diag_out.size or pv.shape[0] != P.diag_in.size or pu.shape[1] != pv.shape[1]:
        raise DimensionMismatchError(
            "consensus factors do not match the preconditioner",
            {"P_U": pu.shape, "P_V": pv.shape, "diag_out": P.diag_out.size, "diag_in": P.diag_in.size},
        )

    u_hat = pu / P.diag_out[:, None]
    v_hat = pv / P.diag_in[:, None]
    norm_u = float(np.linalg.norm(u_hat))
    norm_v = float(np.linalg.norm(v_hat))
    eta = float(np.sqrt(norm_v / norm_u)) if norm_u > 0 and norm_v > 0 else 1.0

    latent_U = eta * u_hat
    latent_V = v_hat / eta
    s1 = np.maximum(np.mean(np.abs(latent_U), axis=1), scale_floor)
    s2 = np.maximum(np.mean(np.abs(latent_V), axis=1), scale_floor)
    logger.debug(f"Balanced latents: eta={eta:.4g} |U|={norm_u:.4g} |V|={norm_v:.4g}")
    return BalancedLatents(latent_U=latent_U, latent_V=latent_V, s1=s1, s2=s2, eta=eta)
