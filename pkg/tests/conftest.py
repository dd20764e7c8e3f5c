"""
Pytest configuration for binfactor tests.

Shared fixtures: seeded random generators, a single-threaded Settings object
and isolation of process environment variables that config files export.
"""

import logging
import os
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from binfactor.settings import Settings

logger = logging.getLogger(__name__)


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> Generator[None, None, None]:
    """Keep exported config keys and log files inside the test."""
    saved = dict(os.environ)
    monkeypatch.setenv("NQ_THREADS", "1")
    monkeypatch.setenv("LOGS_DIR", str(tmp_path / "logs"))
    yield
    os.environ.clear()
    os.environ.update(saved)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test sees the same data."""
    return np.random.default_rng(1234)


@pytest.fixture
def single_thread_settings() -> Settings:
    """Settings in the deterministic test mode."""
    return Settings(nq_threads=1, logs_dir="logs")
