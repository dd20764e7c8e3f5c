# src/binfactor/settings.py

import logging
import os
from typing import Any

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

# Config-file keys that are exported to the environment before field resolution
ENV_MAPPING = {
    "nq_threads": "NQ_THREADS",
    "logs_dir": "LOGS_DIR",
    "log_level": "LOG_LEVEL",
    "admm_iters": "ADMM_ITERS",
    "admm_tol": "ADMM_TOL",
    "admm_ridge": "ADMM_RIDGE",
    "gamma": "GAMMA",
    "percentile": "PERCENTILE",
    "eps_floor": "EPS_FLOOR",
    "scale_floor": "SCALE_FLOOR",
    "seed": "SEED",
}


class Settings(BaseSettings):
    """Process-wide defaults, resolved from keyword arguments, environment, .env and an optional config file."""

    # Parallelism
    nq_threads: int | None = Field(
        default=None, ge=1, description="Worker cap for per-layer processing and torch threads; unset means CPU count"
    )

    # Logging
    logs_dir: str = Field(default="logs", description="Directory for log files")
    log_level: str = Field(default="INFO", description="File log level")

    # Solver defaults that seed a PipelineConfig
    admm_iters: int = Field(default=400, ge=1, description="ADMM sweeps per layer")
    admm_tol: float = Field(default=1e-4, gt=0, description="Relative primal residual for early stopping")
    admm_ridge: float = Field(default=1e-4, ge=0, description="Ridge weight in the factor solves")
    gamma: float = Field(default=0.2, ge=0, le=1, description="Shrinkage toward the mean diagonal entry")
    percentile: float = Field(default=0.99, gt=0, lt=1, description="Clipping quantile for activation RMS")
    eps_floor: float = Field(default=1e-8, gt=0, description="Lower bound for preconditioner entries")
    scale_floor: float = Field(default=1e-12, gt=0, description="Lower bound for s1 and s2")
    jitter_schedule: tuple[float, ...] = Field(
        default=(1e-10, 1e-7, 1e-4), description="Relative diagonal jitter tried when a Cholesky solve fails"
    )
    seed: int = Field(default=0, description="Seed for initialization noise and batch order")

    config_file: str | None = Field(default=None, description="Path to configuration file")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        env_prefix="",
        env_ignore_empty=True,
        extra="ignore",
    )

    def __init__(self, config_file: str | None = None, **kwargs: Any) -> None:
        """Load ``config_file`` into the environment first, then resolve fields as usual."""
        if config_file:
            from .config import EnvironmentConfig

            env_config = EnvironmentConfig(config_file=config_file)
            for key, value in env_config.config_data.items():
                if key in ENV_MAPPING and key not in kwargs:
                    os.environ[ENV_MAPPING[key]] = str(value)
            kwargs["config_file"] = config_file

        super().__init__(**kwargs)
