# src/binfactor/services/pipeline.py
"""
End-to-end factorization of a chain of weight matrices.

Phase 1 turns calibration activations into per-layer preconditioners.
Phase 2 walks the chain group by group: dense weights of the group are tuned
to absorb error from the already-factorized prefix, each weight is
preconditioned, factorized by latent binary ADMM, balanced, and the group is
refined through the sign function. Phase 3 tunes every scale vector of the
whole chain against the full-precision outputs with the packed signs frozen.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..accounting.bpw import rank_for_target_bpw
from ..admm import AdmmConfig, AdmmState, admm_factorize
from ..balancing import BalancedLatents, balance_and_extract_scales
from ..linalg import DenseMatrix, as_dense, relative_frobenius_error
from ..packing.bits import FactorizedLayer, reconstruct_dense
from ..preconditioner import (
    ChannelStats,
    Preconditioner,
    accumulate_stats,
    build_preconditioner,
    precondition_weight,
)
from ..refinement.chain import (
    Activation,
    DenseLayer,
    FactorizedLatentLayer,
    ToyChain,
    flip_ratio,
    forward_chain,
    layer_inputs,
)
from ..refinement.tuning import TuneConfig, block_loss, kd_loss, mitigate_error_propagation, ste_refine, tune_scales_kd
from ..settings import Settings
from ..utils.exceptions import BinFactorError, DimensionMismatchError, LayerProcessingError, ValidationError
from ..utils.file_formats import NamedLayer, write_packed_model
from ..utils.json_utils import write_model_json
from ..utils.performance import PerformanceMetrics, apply_thread_cap, resolve_thread_count
from ..utils.timestamp_utils import get_iso8601_utc_timestamp

logger = logging.getLogger(__name__)


class PipelineConfig(BaseModel):
    """Every knob of a factorization run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rank: int | None = Field(default=None, ge=1, description="Fixed rank for every layer")
    target_bpw: float | None = Field(default=None, gt=0, description="Per-layer target bits per weight")
    group_size: int = Field(default=1, ge=1, description="Consecutive layers reconstructed together")
    activation: Activation = Field(default=Activation.NONE)
    admm: AdmmConfig = Field(
        default_factory=lambda: AdmmConfig(rank=1), description="Solver template; rank is set per layer"
    )
    tune_pre: TuneConfig = Field(default_factory=TuneConfig.pre_factorization)
    tune_post: TuneConfig = Field(default_factory=TuneConfig.post_factorization)
    tune_global: TuneConfig = Field(default_factory=TuneConfig.global_scales)
    run_mitigation: bool = True
    run_refinement: bool = True
    run_global_tuning: bool = True
    gamma: float = Field(default=0.2, ge=0, le=1)
    percentile: float = Field(default=0.99, gt=0, lt=1)
    eps_floor: float = Field(default=1e-8, gt=0)
    scale_floor: float = Field(default=1e-12, gt=0)
    seed: int = 0
    output_stats: dict[str, ChannelStats] | None = Field(
        default=None, exclude=True, description="Output-side statistics per layer name"
    )

    @model_validator(mode="after")
    def _check_rank_choice(self) -> "PipelineConfig":
        if (self.rank is None) == (self.target_bpw is None):
            raise ValueError("set exactly one of rank and target_bpw")
        return self

    @classmethod
    def from_settings(cls, settings: Settings, **overrides: Any) -> "PipelineConfig":
        """Defaults from ``settings``; explicit ``overrides`` win, nested sections merge."""
        admm = {
            "rank": 1,
            "max_iters": settings.admm_iters,
            "tol": settings.admm_tol,
            "ridge": settings.admm_ridge,
            "seed": settings.seed,
            "jitter_schedule": settings.jitter_schedule,
        }
        admm.update(overrides.pop("admm", None) or {})
        values: dict[str, Any] = {
            "gamma": settings.gamma,
            "percentile": settings.percentile,
            "eps_floor": settings.eps_floor,
            "scale_floor": settings.scale_floor,
            "seed": settings.seed,
            "admm": admm,
        }
        for role, factory in (
            ("tune_pre", TuneConfig.pre_factorization),
            ("tune_post", TuneConfig.post_factorization),
            ("tune_global", TuneConfig.global_scales),
        ):
            section = overrides.pop(role, None) or {}
            if isinstance(section, TuneConfig):
                section = section.model_dump()
            values[role] = factory(**{"seed": settings.seed, **section})
        values.update(overrides)
        return cls.model_validate(values)

    def rank_for(self, n: int, m: int) -> int:
        if self.rank is not None:
            return self.rank
        assert self.target_bpw is not None
        return rank_for_target_bpw(n, m, self.target_bpw)


class LayerMetrics(BaseModel):
    name: str
    n: int
    m: int
    rank: int
    relative_error: float = Field(description="‖W − Ŵ‖/‖W‖ of the final packed layer")
    relative_error_admm: float = Field(description="Same measure right after balancing")
    flip_ratio_u: float
    flip_ratio_v: float
    flip_ratio: float = Field(description="Flips over U and V together")
    bpw: float
    payload_bits: int
    admm_iterations: int
    admm_converged: bool
    lagrangian_trace: list[float]
    duration_seconds: float


class PipelineReport(BaseModel):
    created_at: str
    seed: int
    layers: list[LayerMetrics]
    total_payload_bits: int
    total_params: int
    bpw: float
    block_loss_before_global: float | None = None
    kd_loss_before: float | None = None
    kd_loss_after: float | None = None


@dataclass(slots=True)
class PipelineResult:
    layers: list[NamedLayer]
    report: PipelineReport
    chain: ToyChain


@dataclass(slots=True)
class LayerOutcome:
    """One factorized weight, before group refinement."""

    balanced: BalancedLatents
    state: AdmmState
    preconditioner: Preconditioner


def input_statistics(inputs: DenseMatrix, percentile: float) -> ChannelStats:
    """Channel statistics of inputs laid out as columns."""
    return accumulate_stats(ChannelStats.empty(inputs.shape[0]), inputs.T, percentile)


def factorize_weight(W: ArrayLike, P: Preconditioner, rank: int, config: PipelineConfig) -> LayerOutcome:
    """Precondition, run ADMM at ``rank`` and balance back into the original coordinates."""
    weight = as_dense(W, "W")
    W_tilde = precondition_weight(weight, P)
    result = admm_factorize(W_tilde, config.admm.model_copy(update={"rank": rank}))
    balanced = balance_and_extract_scales(result.P_U, result.P_V, P, config.scale_floor)
    return LayerOutcome(balanced=balanced, state=result.state, preconditioner=P)


class FactorizationService:
    """Runs the factorization pipeline with settings-driven parallelism."""

    def __init__(self, settings: Settings | None = None):
        self.settings = settings or Settings()
        self.threads = resolve_thread_count(self.settings.nq_threads)
        apply_thread_cap(self.threads)

    def _map_layers(self, func, items: Sequence[Any]) -> list[Any]:
        if self.threads == 1 or len(items) == 1:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as pool:
            return list(pool.map(func, items))

    def factorize_layer(
        self,
        W: ArrayLike,
        X: ArrayLike,
        config: PipelineConfig,
        preconditioner: Preconditioner | None = None,
        name: str = "layer",
    ) -> tuple[FactorizedLayer, LayerMetrics]:
        """Single-layer pipeline: statistics, ADMM, balancing, refinement and packing."""
        weight = as_dense(W, "W")
        inputs = as_dense(X, "X")
        if inputs.shape[0] != weight.shape[1]:
            raise DimensionMismatchError("X rows must match W columns", {"W": weight.shape, "X": inputs.shape})
        P = preconditioner or build_preconditioner(
            input_statistics(inputs, config.percentile),
            gamma=config.gamma,
            eps_floor=config.eps_floor,
            out_channels=weight.shape[0],
        )
        metric = PerformanceMetrics(name)
        outcome = factorize_weight(weight, P, config.rank_for(*weight.shape), config)
        chain = ToyChain(layers=(FactorizedLatentLayer.from_balanced(outcome.balanced),))
        if config.run_refinement:
            chain = ste_refine(chain, inputs, weight @ inputs, config.tune_post, scale_floor=config.scale_floor)
        refined = chain.layers[0]
        assert isinstance(refined, FactorizedLatentLayer)
        packed = FactorizedLayer.from_latents(refined.latent_U, refined.latent_V, refined.s1, refined.s2)
        metric.complete()
        return packed, self._layer_metrics(name, weight, outcome, refined, packed, metric)

    def run_pipeline(
        self, weights: Sequence[tuple[str, ArrayLike]], calib: ArrayLike, config: PipelineConfig
    ) -> PipelineResult:
        """
        Factorize every weight of the chain.

        Args:
            weights: Named weights in chain order; weight i maps layer i's input to its output.
            calib: Calibration samples, samples x input channels of the first weight.
            config: Run configuration.
        """
        names, chain = self._build_chain(weights, config.activation)
        samples = as_dense(calib, "calib")
        if samples.shape[1] != chain.in_dim:
            raise DimensionMismatchError(
                "calibration columns must match the first layer input", {"calib": samples.shape, "in_dim": chain.in_dim}
            )
        X = np.ascontiguousarray(samples.T)
        originals = [layer.W for layer in chain.layers if isinstance(layer, DenseLayer)]
        logger.info(f"Pipeline start: {len(names)} layers, {X.shape[1]} calibration samples, {self.threads} threads")

        # Phase 1
        fp_inputs = layer_inputs(chain, X)
        preconditioners = self._map_layers(
            lambda i: self._with_layer_name(names[i], self._preconditioner, names[i], fp_inputs[i], originals[i], config),
            list(range(len(names))),
        )

        # Phase 2
        current = chain
        metrics: list[LayerMetrics | None] = [None] * len(names)
        packed: list[FactorizedLayer | None] = [None] * len(names)
        for start in range(0, len(names), config.group_size):
            stop = min(start + config.group_size, len(names))
            current = self._reconstruct_group(
                current, chain, X, start, stop, names, originals, preconditioners, config, metrics, packed
            )

        # Phase 3
        report_extras: dict[str, float] = {}
        if config.run_global_tuning:
            report_extras["block_loss_before_global"] = block_loss(current, X, forward_chain(chain, X))
            report_extras["kd_loss_before"] = kd_loss(current, chain, X)
            current = self._with_layer_name(
                "global", tune_scales_kd, current, chain, X, config.tune_global, config.scale_floor
            )
            report_extras["kd_loss_after"] = kd_loss(current, chain, X)

        named_layers: list[NamedLayer] = []
        final_metrics: list[LayerMetrics] = []
        for i, name in enumerate(names):
            layer = current.layers[i]
            assert isinstance(layer, FactorizedLatentLayer)
            frozen = packed[i]
            assert frozen is not None and metrics[i] is not None
            final = FactorizedLayer(U_packed=frozen.U_packed, V_packed=frozen.V_packed, s1=layer.s1.copy(), s2=layer.s2.copy())
            named_layers.append(NamedLayer(name=name, layer=final))
            final_metrics.append(
                metrics[i].model_copy(update={"relative_error": relative_frobenius_error(originals[i], reconstruct_dense(final))})
            )

        total_bits = sum(item.layer.payload_bits for item in named_layers)
        total_params = sum(item.layer.n * item.layer.m for item in named_layers)
        report = PipelineReport(
            created_at=get_iso8601_utc_timestamp(),
            seed=config.seed,
            layers=final_metrics,
            total_payload_bits=total_bits,
            total_params=total_params,
            bpw=total_bits / total_params,
            **report_extras,
        )
        logger.info(f"Pipeline finished: {len(names)} layers at {report.bpw:.4f} bpw")
        return PipelineResult(layers=named_layers, report=report, chain=current)

    def write_outputs(self, result: PipelineResult, output: str | Path, report_path: str | Path | None = None) -> int:
        size = write_packed_model(output, result.layers)
        if report_path is not None:
            write_model_json(report_path, result.report)
        return size

    @staticmethod
    def _build_chain(weights: Sequence[tuple[str, ArrayLike]], activation: Activation) -> tuple[list[str], ToyChain]:
        if not weights:
            raise ValidationError("at least one weight is required")
        names = [name for name, _ in weights]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique", {"names": ", ".join(names)})
        layers = tuple(DenseLayer(W=as_dense(values, name)) for name, values in weights)
        return names, ToyChain(layers=layers, activation=activation)

    @staticmethod
    def _with_layer_name(name: str, func, *args: Any) -> Any:
        try:
            return func(*args)
        except LayerProcessingError:
            raise
        except BinFactorError as e:
            logger.error(f"Layer {name} failed: {e}")
            raise LayerProcessingError(name, e) from e

    @staticmethod
    def _preconditioner(name: str, inputs: DenseMatrix, W: DenseMatrix, config: PipelineConfig) -> Preconditioner:
        out_stats = (config.output_stats or {}).get(name)
        return build_preconditioner(
            input_statistics(inputs, config.percentile),
            out_stats=out_stats,
            gamma=config.gamma,
            eps_floor=config.eps_floor,
            out_channels=W.shape[0],
        )

    def _reconstruct_group(
        self,
        current: ToyChain,
        reference: ToyChain,
        X: DenseMatrix,
        start: int,
        stop: int,
        names: list[str],
        originals: list[DenseMatrix],
        preconditioners: list[Preconditioner],
        config: PipelineConfig,
        metrics: list[LayerMetrics | None],
        packed: list[FactorizedLayer | None],
    ) -> ToyChain:
        group_name = "+".join(names[start:stop])
        X_group = layer_inputs(current, X)[start]
        teacher = forward_chain(reference.slice(0, stop), X)
        group = current.slice(start, stop)

        if config.run_mitigation:
            group = self._with_layer_name(
                group_name, mitigate_error_propagation, group, X_group, teacher, config.tune_pre
            )

        def factorize(i: int) -> tuple[LayerOutcome, PerformanceMetrics]:
            layer = group.layers[i - start]
            assert isinstance(layer, DenseLayer)
            timer = PerformanceMetrics(names[i])
            outcome = self._with_layer_name(
                names[i], lambda: factorize_weight(layer.W, preconditioners[i], config.rank_for(*layer.W.shape), config)
            )
            timer.complete()
            logger.info(
                f"Layer {names[i]}: rank {outcome.balanced.rank}, {outcome.state.iteration} ADMM sweeps "
                f"in {timer.duration:.2f}s"
            )
            return outcome, timer

        outcomes = self._map_layers(factorize, list(range(start, stop)))
        latent_group = ToyChain(
            layers=tuple(FactorizedLatentLayer.from_balanced(outcome.balanced) for outcome, _ in outcomes),
            activation=group.activation,
        )
        if config.run_refinement:
            latent_group = self._with_layer_name(
                group_name, ste_refine, latent_group, X_group, teacher, config.tune_post, None, config.scale_floor
            )

        updated = current
        for offset, (outcome, timer) in enumerate(outcomes):
            i = start + offset
            refined = latent_group.layers[offset]
            assert isinstance(refined, FactorizedLatentLayer)
            layer = FactorizedLayer.from_latents(refined.latent_U, refined.latent_V, refined.s1, refined.s2)
            packed[i] = layer
            metrics[i] = self._layer_metrics(names[i], originals[i], outcome, refined, layer, timer)
            updated = updated.with_layer(i, refined)
        return updated

    @staticmethod
    def _layer_metrics(
        name: str,
        W: DenseMatrix,
        outcome: LayerOutcome,
        refined: FactorizedLatentLayer,
        layer: FactorizedLayer,
        timer: PerformanceMetrics,
    ) -> LayerMetrics:
        balanced = outcome.balanced
        admm_layer = FactorizedLayer.from_balanced(balanced)
        before = np.concatenate([balanced.latent_U.ravel(), balanced.latent_V.ravel()])
        after = np.concatenate([refined.latent_U.ravel(), refined.latent_V.ravel()])
        return LayerMetrics(
            name=name,
            n=layer.n,
            m=layer.m,
            rank=layer.r,
            relative_error=relative_frobenius_error(W, reconstruct_dense(layer)),
            relative_error_admm=relative_frobenius_error(W, reconstruct_dense(admm_layer)),
            flip_ratio_u=flip_ratio(balanced.latent_U, refined.latent_U),
            flip_ratio_v=flip_ratio(balanced.latent_V, refined.latent_V),
            flip_ratio=flip_ratio(before, after),
            bpw=layer.payload_bits / (layer.n * layer.m),
            payload_bits=layer.payload_bits,
            admm_iterations=outcome.state.iteration,
            admm_converged=outcome.state.converged,
            lagrangian_trace=list(outcome.state.lagrangian_trace),
            duration_seconds=timer.duration,
        )
