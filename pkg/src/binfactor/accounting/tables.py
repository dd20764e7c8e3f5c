# src/binfactor/accounting/tables.py
"""Model-level BPW bounds and checkpoint-size tables over the shipped shapes."""

import csv
import logging
from collections.abc import Iterable, Sequence
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Literal

from pydantic import BaseModel

from .bpw import FP16_BITS, MAX_SALIENT_COLUMNS, BaselineParams, Method, RankPolicy, model_report
from .shapes import SHIPPED_MODELS, ModelShape, load_shipped_shape

logger = logging.getLogger(__name__)

Units = Literal["decimal", "binary"]

REFERENCE_TARGET_BPW = 1.0
SALIENT_BOUNDS = (0, MAX_SALIENT_COLUMNS)

BASELINE_COLUMNS: tuple[tuple[str, BaselineParams], ...] = (
    ("billm", BaselineParams(method=Method.BILLM)),
    ("stbllm-4:8", BaselineParams(method=Method.STBLLM, sparsity_n=4, sparsity_m=8)),
    ("stbllm-6:8", BaselineParams(method=Method.STBLLM, sparsity_n=6, sparsity_m=8)),
    ("stbllm-8:8", BaselineParams(method=Method.STBLLM, sparsity_n=8, sparsity_m=8)),
    ("arb-rc", BaselineParams(method=Method.ARB_RC)),
    ("hbllm-row", BaselineParams(method=Method.HBLLM_ROW)),
    ("hbllm-col", BaselineParams(method=Method.HBLLM_COL)),
)


def round2(value: Fraction | float) -> Decimal:
    """Round to two decimals, ties to even, without binary float error."""
    exact = Fraction(value)
    with localcontext() as ctx:
        ctx.prec = 60
        quotient = Decimal(exact.numerator) / Decimal(exact.denominator)
        return quotient.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


Bounds = tuple[Decimal, Decimal]


class BpwTableRow(BaseModel):
    model: str
    bf16: Decimal
    binfactor: Decimal
    bounds: dict[str, Bounds]


class SizeTableRow(BaseModel):
    model: str
    units: Units
    bf16: Decimal
    binfactor: Decimal
    bounds: dict[str, Bounds]


def _exact_bpw(shape: ModelShape, params: BaselineParams) -> Fraction:
    report = model_report(shape, params.method, params=params)
    return Fraction(report.total_bits, report.quantized_params)


def _exact_size(shape: ModelShape, total_bits: int, units: Units) -> Fraction:
    divisor = 10**9 if units == "decimal" else 2**30
    return Fraction(total_bits + FP16_BITS * shape.residual_fp16_params, 8 * divisor)


def _salient_variants(params: BaselineParams) -> list[BaselineParams]:
    return [params.model_copy(update={"c": c}) for c in SALIENT_BOUNDS]


def bpw_row(shape: ModelShape) -> BpwTableRow:
    reference = model_report(shape, Method.BINFACTOR, rank_policy=RankPolicy(target_bpw=REFERENCE_TARGET_BPW))
    bounds: dict[str, Bounds] = {}
    for label, params in BASELINE_COLUMNS:
        values = [_exact_bpw(shape, variant) for variant in _salient_variants(params)]
        bounds[label] = (round2(min(values)), round2(max(values)))
    return BpwTableRow(
        model=shape.name,
        bf16=round2(FP16_BITS),
        binfactor=round2(Fraction(reference.total_bits, reference.quantized_params)),
        bounds=bounds,
    )


def size_row(shape: ModelShape, units: Units = "binary") -> SizeTableRow:
    """
    Checkpoint sizes with the output head held at 16 bits.

    The BF16 and binfactor columns share a tied head with the embedding table.
    Baseline checkpoints always store the head as its own 16-bit matrix.
    """
    sized = shape.with_head_as_residual()
    separate_head = shape.with_head_as_residual(store_tied_head=True)
    reference = model_report(sized, Method.BINFACTOR, rank_policy=RankPolicy(target_bpw=REFERENCE_TARGET_BPW))
    bounds: dict[str, Bounds] = {}
    for label, params in BASELINE_COLUMNS:
        values = [
            _exact_size(separate_head, model_report(separate_head, variant.method, params=variant).total_bits, units)
            for variant in _salient_variants(params)
        ]
        bounds[label] = (round2(min(values)), round2(max(values)))
    return SizeTableRow(
        model=shape.name,
        units=units,
        bf16=round2(_exact_size(sized, FP16_BITS * sized.quantized_params, units)),
        binfactor=round2(_exact_size(sized, reference.total_bits, units)),
        bounds=bounds,
    )


def bpw_table(models: Sequence[str] = SHIPPED_MODELS) -> list[BpwTableRow]:
    return [bpw_row(load_shipped_shape(model)) for model in models]


def size_table(models: Sequence[str] = SHIPPED_MODELS, units: Units = "binary") -> list[SizeTableRow]:
    return [size_row(load_shipped_shape(model), units) for model in models]


def _format_bounds(bounds: Bounds) -> str:
    return f"({bounds[0]}, {bounds[1]})"


def table_records(rows: Iterable[BpwTableRow | SizeTableRow]) -> list[dict[str, str]]:
    records = []
    for row in rows:
        record = {"model": row.model, "bf16": str(row.bf16), "binfactor": str(row.binfactor)}
        record.update({label: _format_bounds(bounds) for label, bounds in row.bounds.items()})
        records.append(record)
    return records


def write_table_csv(path: str | Path, rows: Iterable[BpwTableRow | SizeTableRow]) -> int:
    records = table_records(rows)
    if not records:
        return 0
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(records[0]))
        writer.writeheader()
        writer.writerows(records)
    logger.info(f"Wrote {len(records)} table rows to {target}")
    return len(records)
