# src/binfactor/cli.py
"""
binfactor - low-rank binary factorization CLI.

Usage Examples:
    # Factorize a two-layer chain at one bit per weight
    binfactor factorize --input fc1.nqmx --input fc2.nqmx --calib calib.nqmx \
        --target-bpw 1.0 --output model.nqpk --report report.json

    # Run packed inference on a batch of column vectors
    binfactor infer --model model.nqpk --vector-in x.nqmx --out y.nqmx --batch

    # Storage accounting for a shipped model shape, or the full tables as CSV
    binfactor bpw --model L2-7 --method billm --c 50
    binfactor bpw --table tables.csv

    # Consistency checks and throughput of a packed file
    binfactor verify --model model.nqpk
    binfactor bench --model model.nqpk --csv bench.csv
"""

import csv
import datetime
import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from tempfile import TemporaryDirectory
from typing import Any

import numpy as np
import pydantic
import typer
from rich.console import Console
from rich.table import Table

from .accounting.bpw import BaselineParams, Method, RankPolicy, model_report
from .accounting.shapes import SHIPPED_MODELS, ModelShape, load_shipped_shape
from .accounting.tables import bpw_table, size_table, table_records, write_table_csv
from .config import load_pipeline_overrides
from .packing.bits import FactorizedLayer, reconstruct_dense
from .packing.inference import gemm_packed, gemv_packed
from .refinement.chain import Activation
from .services.pipeline import FactorizationService, PipelineConfig
from .settings import Settings
from .utils.exceptions import BinFactorError, NumericalError, ValidationError, VerificationError
from .utils.file_formats import (
    NamedLayer,
    read_matrix,
    read_packed_model,
    read_shape_config,
    write_matrix,
    write_packed_model,
    write_shape_config,
)
from .utils.performance import PerformanceMetrics, measure_execution_time, summarize_metrics
from .utils.timestamp_utils import format_timestamp_for_filename

logger = logging.getLogger(__name__)

console = Console()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

_file_handler: logging.Handler | None = None


def setup_application_logging(logs_dir: str = "logs", level: str = "INFO") -> Path | None:
    """File handler for everything, console handler for CRITICAL only; safe to call twice."""
    global _file_handler
    root_logger = logging.getLogger()
    if _file_handler is not None and _file_handler in root_logger.handlers:
        return Path(getattr(_file_handler, "baseFilename", logs_dir))

    log_path = Path(logs_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    app_log_file = log_path / f"binfactor_{format_timestamp_for_filename()}.log"

    _file_handler = logging.FileHandler(app_log_file, mode="a", encoding="utf-8")
    _file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    _file_handler.setLevel(getattr(logging, level.upper(), logging.INFO))

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter("%(message)s"))
    console_handler.setLevel(logging.CRITICAL)

    root_logger.addHandler(_file_handler)
    root_logger.addHandler(console_handler)
    root_logger.setLevel(logging.DEBUG)
    return app_log_file


def log_command_start() -> None:
    current_time = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    logger.info(f"--- Log started on {current_time} with arguments: {' '.join(sys.argv)} ---")


@contextmanager
def handle_errors() -> Iterator[None]:
    """Map failures onto exit codes: 2 for bad input, 3 for numerical failure, 1 otherwise."""
    try:
        yield
    except typer.Exit:
        raise
    except (ValidationError, pydantic.ValidationError) as e:
        logger.error(f"Validation error: {e}")
        console.print(f"[red]❌ Invalid input: {e}[/red]")
        raise typer.Exit(code=EXIT_VALIDATION) from e
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        console.print(f"[red]❌ Numerical failure: {e}[/red]")
        raise typer.Exit(code=EXIT_NUMERICAL) from e
    except BinFactorError as e:
        code = getattr(e, "exit_code", 1)
        logger.error(f"Error: {e}")
        console.print(f"[red]❌ {e}[/red]")
        raise typer.Exit(code=code) from e
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        console.print(f"[red]❌ File not found: {e.filename}[/red]")
        raise typer.Exit(code=EXIT_VALIDATION) from e
    except Exception as e:
        logger.exception("Unexpected error")
        console.print(f"[red]❌ Unexpected error: {e!s}[/red]")
        console.print("💡 Check the logs for more details.")
        raise typer.Exit(code=1) from e


def main_callback(
    ctx: typer.Context,
    version: bool = typer.Option(None, "--version", "-v", help="Show version and exit", is_eager=True),
) -> None:
    """Show version, or set up logging for the chosen command."""
    if version:
        from binfactor import __version__

        console.print(f"binfactor version {__version__}")
        raise typer.Exit()
    if ctx.invoked_subcommand is None:
        console.print(ctx.get_help())
        raise typer.Exit()
    settings = Settings()
    setup_application_logging(settings.logs_dir, settings.log_level)


app = typer.Typer(
    help="binfactor - low-rank binary weight factorization",
    rich_markup_mode="rich",
    callback=main_callback,
    invoke_without_command=True,
)


@app.command()
def factorize(
    inputs: list[Path] = typer.Option(..., "--input", "-i", help="NQMX weight files in chain order (repeatable)"),
    calib: Path = typer.Option(..., "--calib", help="NQMX calibration samples (samples x input channels)"),
    output: Path = typer.Option(..., "--output", "-o", help="Packed model file to write"),
    rank: int = typer.Option(None, "--rank", "-r", help="Fixed rank for every layer"),
    target_bpw: float = typer.Option(None, "--target-bpw", help="Per-layer target bits per weight"),
    gamma: float = typer.Option(None, "--gamma", help="Preconditioner shrinkage in [0, 1]"),
    percentile: float = typer.Option(None, "--percentile", help="Activation clipping quantile in (0, 1)"),
    admm_iters: int = typer.Option(None, "--admm-iters", help="ADMM sweeps per layer"),
    seed: int = typer.Option(None, "--seed", help="Random seed"),
    epochs: int = typer.Option(None, "--epochs", help="Epochs for every tuning stage"),
    group_size: int = typer.Option(None, "--group-size", help="Layers reconstructed together"),
    activation: Activation = typer.Option(None, "--activation", help="Activation between layers"),
    report: Path = typer.Option(None, "--report", help="Write the metrics report as JSON"),
    config_file: str = typer.Option(None, "--config-file", help="Path to a .env, YAML or JSON config file"),
) -> None:
    """Factorize a chain of weight matrices into a packed model file."""
    log_command_start()
    with handle_errors():
        if rank is not None and target_bpw is not None:
            raise ValidationError("pass at most one of --rank and --target-bpw")
        settings = Settings(config_file=config_file)
        overrides = load_pipeline_overrides(config_file)
        # A rank choice on the command line replaces the one from the config file
        if rank is not None:
            overrides.pop("target_bpw", None)
        elif target_bpw is not None:
            overrides.pop("rank", None)
        cli_values: dict[str, Any] = {
            "rank": rank,
            "target_bpw": target_bpw,
            "gamma": gamma,
            "percentile": percentile,
            "seed": seed,
            "group_size": group_size,
            "activation": activation,
        }
        overrides.update({key: value for key, value in cli_values.items() if value is not None})
        if admm_iters is not None:
            overrides["admm"] = {**overrides.get("admm", {}), "max_iters": admm_iters}
        if seed is not None:
            overrides["admm"] = {**overrides.get("admm", {}), "seed": seed}
        for role in ("tune_pre", "tune_post", "tune_global"):
            section = dict(overrides.get(role, {}))
            if epochs is not None:
                section["epochs"] = epochs
            if seed is not None:
                section["seed"] = seed
            overrides[role] = section
        config = PipelineConfig.from_settings(settings, **overrides)

        weights = [(path.stem, read_matrix(path)) for path in inputs]
        samples = read_matrix(calib)
        service = FactorizationService(settings)
        console.print(f"Factorizing {len(weights)} layers with {service.threads} threads...")
        result = service.run_pipeline(weights, samples, config)
        size = service.write_outputs(result, output, report)

        table = Table(title="Factorized layers")
        for column in ("layer", "n×m", "rank", "bpw", "rel. error", "flip ratio", "ADMM sweeps"):
            table.add_column(column)
        for item in result.report.layers:
            table.add_row(
                item.name,
                f"{item.n}×{item.m}",
                str(item.rank),
                f"{item.bpw:.4f}",
                f"{item.relative_error:.3e}",
                f"{item.flip_ratio:.4f}",
                str(item.admm_iterations),
            )
        console.print(table)
        console.print(f"[green]Wrote {output} ({size} bytes, {result.report.bpw:.4f} bpw)[/green]")


def _apply_layer(layer: FactorizedLayer, X: np.ndarray, batch: bool, precision: int) -> np.ndarray:
    if batch or X.shape[1] > 1:
        return gemm_packed(layer, X, precision=precision)  # type: ignore[arg-type]
    return gemv_packed(layer, X[:, 0], precision=precision)[:, None]  # type: ignore[arg-type]


@app.command()
def infer(
    model: Path = typer.Option(..., "--model", "-m", help="Packed model file"),
    vector_in: Path = typer.Option(..., "--vector-in", help="NQMX inputs as columns (m x b)"),
    out: Path = typer.Option(..., "--out", help="NQMX file for the outputs (n x b)"),
    batch: bool = typer.Option(False, "--batch", help="Use the batched kernel even for a single column"),
    layer_name: str = typer.Option(None, "--layer", help="Apply one named layer instead of the whole chain"),
    precision: int = typer.Option(64, "--precision", help="Accumulation precision: 32 or 64"),
) -> None:
    """Multiply inputs through packed layers without forming dense weights."""
    log_command_start()
    with handle_errors():
        layers = read_packed_model(model)
        if layer_name is not None:
            layers = [item for item in layers if item.name == layer_name]
            if not layers:
                raise ValidationError("no layer with that name in the model", {"layer": layer_name})
        h = read_matrix(vector_in)
        for item in layers:
            if h.shape[0] != item.layer.m:
                raise ValidationError(
                    "input rows do not match the layer", {"layer": item.name, "rows": h.shape[0], "m": item.layer.m}
                )
            h = _apply_layer(item.layer, h, batch, precision)
        write_matrix(out, h)
        console.print(f"[green]Wrote {h.shape[0]}×{h.shape[1]} outputs to {out}[/green]")


def _parse_nm(text: str) -> tuple[int, int]:
    left, sep, right = text.partition(":")
    try:
        if not sep:
            raise ValueError(text)
        return int(left), int(right)
    except ValueError as e:
        raise ValidationError("--nm must look like N:M, e.g. 6:8", {"nm": text}) from e


def _print_table(title: str, records: list[dict[str, str]]) -> None:
    table = Table(title=title)
    for column in records[0]:
        table.add_column(column)
    for record in records:
        table.add_row(*record.values())
    console.print(table)


@app.command()
def bpw(
    shape_config: Path = typer.Option(None, "--shape-config", help="Shape-config text file"),
    model: str = typer.Option(None, "--model", help=f"Shipped shape: {', '.join(SHIPPED_MODELS)}"),
    method: Method = typer.Option(Method.BINFACTOR, "--method", help="Storage format"),
    c: int = typer.Option(0, "--c", help="Salient columns (baselines)"),
    k: int = typer.Option(128, "--k", help="Block size (baselines)"),
    nm: str = typer.Option(None, "--nm", help="N:M sparsity for stbllm, e.g. 6:8"),
    rank: int = typer.Option(None, "--rank", help="Fixed rank (factorized formats)"),
    target_bpw: float = typer.Option(None, "--target-bpw", help="Per-layer target (factorized formats)"),
    units: str = typer.Option("binary", "--units", help="Size units: decimal (GB) or binary (GiB)"),
    table: Path = typer.Option(None, "--table", help="Write BPW-bound and size tables for every shipped model as CSV"),
    export_shape: Path = typer.Option(None, "--export-shape", help="Write the resolved shape config to this file"),
) -> None:
    """Bits per weight and checkpoint size for a model shape."""
    log_command_start()
    with handle_errors():
        if units not in ("decimal", "binary"):
            raise ValidationError("--units must be decimal or binary", {"units": units})
        if table is not None:
            bpw_rows = bpw_table()
            size_rows = size_table(units=units)  # type: ignore[arg-type]
            write_table_csv(table, bpw_rows)
            size_path = table.with_name(f"{table.stem}_size_{units}{table.suffix or '.csv'}")
            write_table_csv(size_path, size_rows)
            _print_table("Bits per weight (min, max over c ∈ {0, 50})", table_records(bpw_rows))
            console.print(f"[green]Wrote {table} and {size_path}[/green]")
            return

        shape: ModelShape
        if shape_config is not None:
            shape = read_shape_config(shape_config)
        elif model is not None:
            shape = load_shipped_shape(model)
        else:
            raise ValidationError("pass --shape-config, --model or --table")
        if export_shape is not None:
            write_shape_config(export_shape, shape)
            console.print(f"[green]Wrote shape config for {shape.name} to {export_shape}[/green]")

        params: BaselineParams | None = None
        policy: RankPolicy | None = None
        if method.is_factorized:
            if rank is None and target_bpw is None:
                target_bpw = 1.0
            policy = RankPolicy(rank=rank, target_bpw=None if rank is not None else target_bpw)
        else:
            n_keep, m_group = _parse_nm(nm) if nm else (None, None)
            params = BaselineParams(method=method, c=c, k=k, sparsity_n=n_keep, sparsity_m=m_group)
        result = model_report(shape, method, params=params, rank_policy=policy)

        size = result.size_gb if units == "decimal" else result.size_gib
        unit_label = "GB" if units == "decimal" else "GiB"
        console.print(f"[bold]{shape.name}[/bold] {method.value}: {result.bpw:.4f} bpw, {size:.2f} {unit_label}")
        console.print(f"  quantized params: {result.quantized_params:,}  residual fp16 params: {result.residual_params:,}")


def _verify_layer(item: NamedLayer, rng: np.random.Generator, tolerance: float) -> tuple[float, float]:
    layer = item.layer
    if not (np.all(np.isfinite(layer.s1)) and np.all(np.isfinite(layer.s2))):
        raise VerificationError("scales are not finite", {"layer": item.name})
    if np.any(layer.s1 <= 0) or np.any(layer.s2 <= 0):
        raise VerificationError("scales are not positive", {"layer": item.name})
    dense = reconstruct_dense(layer)
    x = rng.standard_normal(layer.m)
    y = gemv_packed(layer, x, output_precision=64)
    expected = dense @ x
    scale = max(float(np.linalg.norm(expected)), 1e-300)
    deviation = float(np.linalg.norm(y - expected)) / scale
    if deviation > tolerance:
        raise VerificationError("packed product disagrees with the dense reconstruction", {"layer": item.name, "deviation": deviation})
    return deviation, layer.payload_bits / (layer.n * layer.m)


@app.command()
def verify(
    model: Path = typer.Option(..., "--model", "-m", help="Packed model file"),
    seed: int = typer.Option(0, "--seed", help="Seed for the random test vectors"),
    tolerance: float = typer.Option(1e-10, "--tolerance", help="Relative tolerance for the product check"),
) -> None:
    """Round-trip, scale and packed-product checks for a packed model file."""
    log_command_start()
    with handle_errors():
        layers = read_packed_model(model)
        with TemporaryDirectory() as tmp:
            copy = Path(tmp) / "roundtrip.nqpk"
            write_packed_model(copy, layers)
            if copy.read_bytes() != model.read_bytes():
                raise VerificationError("re-serialized file differs from the original", {"file": str(model)})

        rng = np.random.default_rng(seed)
        table = Table(title=f"Verified {model.name}")
        for column in ("layer", "n×m", "rank", "bpw", "gemv deviation"):
            table.add_column(column)
        metrics: list[PerformanceMetrics] = []
        for item in layers:
            metric = PerformanceMetrics(item.name)
            metrics.append(metric)
            dims = f"{item.layer.n}×{item.layer.m}"
            try:
                deviation, layer_bpw = _verify_layer(item, rng, tolerance)
            except VerificationError as e:
                metric.complete(success=False, error_message=e.message)
                table.add_row(item.name, dims, str(item.layer.r), "-", "[red]failed[/red]")
                continue
            metric.complete()
            table.add_row(item.name, dims, str(item.layer.r), f"{layer_bpw:.4f}", f"{deviation:.2e}")
        console.print(table)

        summary = summarize_metrics(metrics)
        logger.info(f"Verification summary: {summary}")
        failed = [metric for metric in metrics if not metric.success]
        for metric in failed:
            console.print(f"[red]{metric.operation_name}: {metric.error_message}[/red]")
        if failed:
            raise VerificationError(
                f"{summary['failed_operations']} of {summary['total_operations']} layers failed verification",
                {"layers": ", ".join(metric.operation_name for metric in failed)},
            )
        console.print(
            f"[green]✓ {summary['successful_operations']} layers passed in {summary['total_duration']:.2f}s "
            f"(slowest: {summary['slowest_operation']})[/green]"
        )


@app.command()
def bench(
    model: Path = typer.Option(None, "--model", "-m", help="Packed model file; random layer when omitted"),
    n: int = typer.Option(1024, "--n", help="Rows of the random layer"),
    m: int = typer.Option(1024, "--m", help="Columns of the random layer"),
    r: int = typer.Option(64, "--r", help="Rank of the random layer"),
    iterations: int = typer.Option(20, "--iterations", help="Timed GEMV calls per path"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    csv_out: Path = typer.Option(None, "--csv", help="Write results as CSV"),
) -> None:
    """Packed GEMV throughput against a dense float32 GEMV."""
    log_command_start()
    with handle_errors():
        if iterations < 1:
            raise ValidationError("--iterations must be positive", {"iterations": iterations})
        rng = np.random.default_rng(seed)
        if model is not None:
            layers = read_packed_model(model)
        else:
            layer = FactorizedLayer.from_latents(
                rng.standard_normal((n, r)), rng.standard_normal((m, r)), rng.uniform(0.5, 1.5, n), rng.uniform(0.5, 1.5, m)
            )
            layers = [NamedLayer(name="random", layer=layer)]

        rows = []
        for item in layers:
            layer = item.layer
            dense = reconstruct_dense(layer).astype(np.float32)
            x = rng.standard_normal(layer.m)
            x32 = x.astype(np.float32)
            _, packed_time = measure_execution_time(lambda: [gemv_packed(layer, x) for _ in range(iterations)])
            _, dense_time = measure_execution_time(lambda: [dense @ x32 for _ in range(iterations)])
            packed_us = packed_time / iterations * 1e6
            dense_us = dense_time / iterations * 1e6
            rows.append(
                {
                    "layer": item.name,
                    "n": layer.n,
                    "m": layer.m,
                    "r": layer.r,
                    "packed_us": round(packed_us, 3),
                    "dense_us": round(dense_us, 3),
                    "slowdown": round(packed_us / dense_us, 3) if dense_us > 0 else float("inf"),
                    "storage_ratio": round(layer.stored_bits / (32 * layer.n * layer.m), 6),
                }
            )

        _print_table("GEMV benchmark (µs per call)", [{key: str(value) for key, value in row.items()} for row in rows])
        if csv_out is not None:
            csv_out.parent.mkdir(parents=True, exist_ok=True)
            with open(csv_out, "w", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)
            console.print(f"[green]Wrote {csv_out}[/green]")


if __name__ == "__main__":
    app()
