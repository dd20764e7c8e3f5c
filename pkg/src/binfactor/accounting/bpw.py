# src/binfactor/accounting/bpw.py
"""
Storage accounting for binary weight formats.

Every formula is evaluated in exact rational arithmetic; conversion to a
float happens only when a bits-per-weight figure is reported.
"""

import logging
import math
from enum import Enum
from fractions import Fraction

from pydantic import BaseModel, Field

from ..utils.exceptions import (
    InvalidRankError,
    InvalidSalientCountError,
    TargetTooSmallError,
    UnsupportedMethodError,
    ValidationError,
)
from .shapes import ModelShape

logger = logging.getLogger(__name__)

FP16_BITS = 16
MAX_SALIENT_COLUMNS = 50
DEFAULT_BLOCK_SIZE = 128
DECIMAL_GB = 10**9
BINARY_GIB = 2**30


class Method(str, Enum):
    BINFACTOR = "binfactor"
    DBF = "dbf"
    LITTLEBIT = "littlebit"
    BILLM = "billm"
    STBLLM = "stbllm"
    ARB_RC = "arb-rc"
    HBLLM_ROW = "hbllm-row"
    HBLLM_COL = "hbllm-col"

    @property
    def is_factorized(self) -> bool:
        return self in (Method.BINFACTOR, Method.DBF, Method.LITTLEBIT)


class BaselineParams(BaseModel):
    """Storage parameters of a binary post-training baseline."""

    method: Method
    c: int = Field(default=0, description="Salient columns")
    k: int = Field(default=DEFAULT_BLOCK_SIZE, ge=1, description="Block size")
    sparsity_n: int | None = Field(default=None, ge=1, description="N of an N:M pattern (stbllm)")
    sparsity_m: int | None = Field(default=None, ge=1, description="M of an N:M pattern (stbllm)")

    def nm(self) -> tuple[int, int]:
        if self.sparsity_n is None or self.sparsity_m is None:
            raise ValidationError("stbllm needs an N:M sparsity pattern", {"method": self.method.value})
        if self.sparsity_n > self.sparsity_m:
            raise ValidationError("N must not exceed M", {"N": self.sparsity_n, "M": self.sparsity_m})
        return self.sparsity_n, self.sparsity_m


def _check_dims(n: int, m: int) -> None:
    if n < 1 or m < 1:
        raise ValidationError("layer dimensions must be positive", {"n": n, "m": m})


def _check_rank(r: int) -> None:
    if r < 1:
        raise InvalidRankError("rank must be at least 1", {"r": r})


def factorized_layer_bits(method: Method, n: int, m: int, r: int) -> int:
    """Signs at one bit plus fp16 scales; the dbf/littlebit format also stores a rank-wise scale."""
    _check_dims(n, m)
    _check_rank(r)
    if method is Method.BINFACTOR:
        return r * (n + m) + FP16_BITS * (n + m)
    if method in (Method.DBF, Method.LITTLEBIT):
        return r * (n + m) + FP16_BITS * (n + m + r)
    raise UnsupportedMethodError("not a factorized method", {"method": method.value})


def index_bits_per_group(sparsity_n: int, sparsity_m: int) -> int:
    """⌈log2 C(M, N)⌉ bits to name which N of M positions survive."""
    choices = math.comb(sparsity_m, sparsity_n)
    return (choices - 1).bit_length()


def baseline_layer_bits(params: BaselineParams, n: int, m: int) -> Fraction:
    _check_dims(n, m)
    c, k = params.c, params.k
    if c < 0 or c > min(MAX_SALIENT_COLUMNS, m):
        raise InvalidSalientCountError(
            "salient column count out of range", {"c": c, "max": min(MAX_SALIENT_COLUMNS, m)}
        )
    blocks = -(-m // k)

    match params.method:
        case Method.BILLM:
            return Fraction(n * (2 * m + c) + m + 112 * n * blocks)
        case Method.ARB_RC:
            return Fraction(n * (2 * m + c) + 33 * m + 64 * n * blocks)
        case Method.HBLLM_ROW:
            return Fraction(2 * n * (m + c) + m + 160 * n * blocks)
        case Method.HBLLM_COL:
            return Fraction(2 * n * m + m + 112 * n * blocks)
        case Method.STBLLM:
            N, M = params.nm()
            salient = 2 * n * c + 48 * n * blocks
            kept = Fraction(N, M) * (n * (m - c) + 2 * n * m)
            indices = Fraction(n * (m - c), M) * index_bits_per_group(N, M)
            scales = 96 * n * blocks
            return salient + kept + indices + scales + m
        case _:
            raise UnsupportedMethodError("not a baseline method", {"method": params.method.value})


def bpw_binfactor(n: int, m: int, r: int) -> float:
    return factorized_layer_bits(Method.BINFACTOR, n, m, r) / (n * m)


def bpw_dbf(n: int, m: int, r: int) -> float:
    return factorized_layer_bits(Method.DBF, n, m, r) / (n * m)


def bpw_baseline(params: BaselineParams, n: int, m: int) -> float:
    return float(baseline_layer_bits(params, n, m) / (n * m))


def rank_quantum(n: int, m: int) -> float:
    """BPW change caused by one unit of rank."""
    return (n + m) / (n * m)


def rank_for_target_bpw(n: int, m: int, target_bpw: float) -> int:
    """Nearest rank to ``target_bpw`` under the two-scale format, clamped to [1, min(n, m)]."""
    _check_dims(n, m)
    if not target_bpw > 0 or not math.isfinite(target_bpw):
        raise ValidationError("target bpw must be a positive number", {"target": target_bpw})
    r = round(target_bpw * n * m / (n + m) - FP16_BITS)
    if r < 1:
        floor_bpw = bpw_binfactor(n, m, 1)
        if floor_bpw > 2 * target_bpw:
            raise TargetTooSmallError(
                "target bpw is unreachable even at rank 1",
                {"n": n, "m": m, "target": target_bpw, "rank1_bpw": floor_bpw},
            )
        r = 1
    return min(r, min(n, m))


class RankPolicy(BaseModel):
    """Either a fixed rank for every layer or a per-layer target bitrate."""

    rank: int | None = Field(default=None, ge=1)
    target_bpw: float | None = Field(default=None, gt=0)

    @classmethod
    def parse(cls, text: str) -> "RankPolicy":
        kind, _, value = text.partition(":")
        try:
            if kind == "fixed":
                return cls(rank=int(value))
            if kind == "target":
                return cls(target_bpw=float(value))
        except ValueError as e:
            raise ValidationError(f"bad rank policy value: {text}") from e
        raise ValidationError("rank policy must be fixed:<r> or target:<bpw>", {"policy": text})

    def rank_for(self, n: int, m: int) -> int:
        if self.rank is not None:
            if self.rank > min(n, m):
                raise InvalidRankError("fixed rank exceeds layer dimensions", {"r": self.rank, "n": n, "m": m})
            return self.rank
        if self.target_bpw is not None:
            return rank_for_target_bpw(n, m, self.target_bpw)
        raise ValidationError("rank policy has neither rank nor target")


class BpwReport(BaseModel):
    method: Method
    per_layer_bits: list[int] = Field(description="Bits of one replica of each shape record")
    ranks: list[int] | None = Field(default=None, description="Per-record ranks for factorized methods")
    total_bits: int = Field(ge=0, description="Quantized bits over all replicas")
    quantized_params: int = Field(ge=1)
    residual_params: int = Field(ge=0)
    bpw: float
    size_gb: float = Field(description="Checkpoint size in decimal gigabytes, residual at 16 bits")
    size_gib: float = Field(description="Checkpoint size in binary gibibytes, residual at 16 bits")

    @property
    def checkpoint_bits(self) -> int:
        return self.total_bits + FP16_BITS * self.residual_params


def model_report(
    shape: ModelShape,
    method: Method,
    params: BaselineParams | None = None,
    rank_policy: RankPolicy | None = None,
) -> BpwReport:
    """Aggregate per-layer storage over every replica of every layer in ``shape``."""
    per_layer: list[int] = []
    ranks: list[int] | None = None
    if method.is_factorized:
        if rank_policy is None:
            raise ValidationError("factorized methods need a rank policy", {"method": method.value})
        ranks = [rank_policy.rank_for(layer.n, layer.m) for layer in shape.layers]
        per_layer = [factorized_layer_bits(method, layer.n, layer.m, r) for layer, r in zip(shape.layers, ranks)]
    else:
        baseline = params if params is not None else BaselineParams(method=method)
        if baseline.method is not method:
            baseline = baseline.model_copy(update={"method": method})
        per_layer = [math.ceil(baseline_layer_bits(baseline, layer.n, layer.m)) for layer in shape.layers]

    total_bits = sum(bits * layer.count for bits, layer in zip(per_layer, shape.layers))
    quantized = shape.quantized_params
    checkpoint_bytes = Fraction(total_bits + FP16_BITS * shape.residual_fp16_params, 8)
    report = BpwReport(
        method=method,
        per_layer_bits=per_layer,
        ranks=ranks,
        total_bits=total_bits,
        quantized_params=quantized,
        residual_params=shape.residual_fp16_params,
        bpw=total_bits / quantized,
        size_gb=float(checkpoint_bytes / DECIMAL_GB),
        size_gib=float(checkpoint_bytes / BINARY_GIB),
    )
    logger.debug(f"{shape.name} {method.value}: bpw={report.bpw:.6f} size={report.size_gib:.4f} GiB")
    return report
