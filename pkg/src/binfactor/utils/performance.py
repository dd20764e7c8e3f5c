# src/binfactor/utils/performance.py
"""Timing records and the thread cap shared by the pipeline and the benchmarks."""

import logging
import os
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, TypeVar

import torch

T = TypeVar("T")

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class PerformanceMetrics:
    operation_name: str
    start_time: float = field(default_factory=time.perf_counter)
    end_time: float = 0.0
    success: bool = True
    error_message: str = ""

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time

    def complete(self, success: bool = True, error_message: str = "") -> None:
        self.end_time = time.perf_counter()
        self.success = success
        self.error_message = error_message


def summarize_metrics(metrics: list[PerformanceMetrics]) -> dict[str, Any]:
    if not metrics:
        return {
            "total_operations": 0,
            "successful_operations": 0,
            "failed_operations": 0,
            "total_duration": 0.0,
            "slowest_operation": None,
        }
    successful = [m for m in metrics if m.success]
    return {
        "total_operations": len(metrics),
        "successful_operations": len(successful),
        "failed_operations": len(metrics) - len(successful),
        "total_duration": sum(m.duration for m in metrics),
        "slowest_operation": max(metrics, key=lambda m: m.duration).operation_name,
    }


def measure_execution_time(func: Callable[[], T]) -> tuple[T, float]:
    """Run ``func`` once and return its result with elapsed seconds."""
    start = time.perf_counter()
    result = func()
    return result, time.perf_counter() - start


def resolve_thread_count(requested: int | None) -> int:
    """Worker count from the NQ_THREADS setting, defaulting to the CPU count."""
    if requested is not None and requested < 1:
        raise ValueError(f"thread count must be positive, got {requested}")
    return requested or os.cpu_count() or 1


def apply_thread_cap(threads: int) -> None:
    """Cap torch's intra-op pool; a cap of 1 gives the deterministic test mode."""
    if torch.get_num_threads() != threads:
        torch.set_num_threads(threads)
        logger.debug(f"torch intra-op threads set to {threads}")
