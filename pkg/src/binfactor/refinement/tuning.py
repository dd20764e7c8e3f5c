# src/binfactor/refinement/tuning.py
"""
Gradient-based tuning of toy chains with torch autograd.

Three operations share one training loop and differ only in which parameters
are trainable and which loss is minimized:

* ``ste_refine`` trains latents and scales of factorized layers against a
  (column-weighted) Frobenius objective, passing gradients straight through
  the sign function;
* ``mitigate_error_propagation`` trains only dense weights on the same
  objective;
* ``tune_scales_kd`` trains only the scales on a forward KL divergence between
  column-wise softmax distributions.

Every operation returns the best checkpoint seen, evaluated on the full input,
so the returned loss never exceeds the starting loss.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from numpy.typing import ArrayLike
from pydantic import BaseModel, Field
from torch.nn import functional as F

from ..linalg import DenseMatrix, as_dense
from ..utils.exceptions import DimensionMismatchError, NonFiniteLossError, NoTunableLayersError
from .chain import Activation, DenseLayer, FactorizedLatentLayer, ToyChain, forward_chain

logger = logging.getLogger(__name__)

DEFAULT_SCALE_FLOOR = 1e-12


class Schedule(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


class TuneConfig(BaseModel):
    """Optimizer settings for one tuning stage."""

    epochs: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=4, ge=1, description="Columns of X per optimizer step")
    schedule: Schedule = Field(default=Schedule.COSINE)
    seed: int = Field(default=0)

    @classmethod
    def pre_factorization(cls, **overrides: object) -> "TuneConfig":
        return cls.model_validate({"learning_rate": 1e-4, "batch_size": 4, **overrides})

    @classmethod
    def post_factorization(cls, **overrides: object) -> "TuneConfig":
        return cls.model_validate({"learning_rate": 1e-5, "batch_size": 1, **overrides})

    @classmethod
    def global_scales(cls, **overrides: object) -> "TuneConfig":
        return cls.model_validate({"learning_rate": 1e-6, "batch_size": 1, **overrides})


class STESign(torch.autograd.Function):
    """sign(x) with sign(0) = +1 forward, identity backward."""

    @staticmethod
    def forward(ctx, x):  # type: ignore[override]
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad_output):  # type: ignore[override]
        return grad_output


@dataclass(slots=True)
class _TorchLayer:
    source: DenseLayer | FactorizedLatentLayer
    params: dict[str, torch.Tensor]
    trainable: tuple[str, ...]


class _TorchChain:
    """Differentiable mirror of a ToyChain; only the requested parameters carry gradients."""

    def __init__(self, chain: ToyChain, train_dense: bool, train_latents: bool, train_scales: bool):
        self.chain = chain
        self.layers: list[_TorchLayer] = []
        for layer in chain.layers:
            if isinstance(layer, DenseLayer):
                names: tuple[str, ...] = ("W",) if train_dense else ()
                params = {"W": torch.tensor(layer.W, dtype=torch.float64, requires_grad=train_dense)}
            else:
                names = (("latent_U", "latent_V") if train_latents else ()) + (("s1", "s2") if train_scales else ())
                params = {
                    key: torch.tensor(getattr(layer, key), dtype=torch.float64, requires_grad=key in names)
                    for key in ("latent_U", "latent_V", "s1", "s2")
                }
            self.layers.append(_TorchLayer(source=layer, params=params, trainable=names))

    def parameters(self) -> list[torch.Tensor]:
        return [layer.params[name] for layer in self.layers for name in layer.trainable]

    def scale_parameters(self) -> list[torch.Tensor]:
        return [layer.params[name] for layer in self.layers for name in layer.trainable if name in ("s1", "s2")]

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        h = X
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            p = layer.params
            if isinstance(layer.source, DenseLayer):
                h = p["W"] @ h
            else:
                u_sign = STESign.apply(p["latent_U"])
                v_sign = STESign.apply(p["latent_V"])
                h = p["s1"][:, None] * (u_sign @ (v_sign.T @ (p["s2"][:, None] * h)))
            if index < last and self.chain.activation is Activation.RELU:
                h = torch.relu(h)
        return h

    def snapshot(self) -> ToyChain:
        layers = []
        for layer in self.layers:
            if not layer.trainable:
                layers.append(layer.source)
                continue
            values = {name: layer.params[name].detach().numpy().copy() for name in layer.trainable}
            if isinstance(layer.source, DenseLayer):
                layers.append(DenseLayer(W=values["W"]))
            else:
                src = layer.source
                layers.append(
                    FactorizedLatentLayer(
                        latent_U=values.get("latent_U", src.latent_U),
                        latent_V=values.get("latent_V", src.latent_V),
                        s1=values.get("s1", src.s1),
                        s2=values.get("s2", src.s2),
                    )
                )
        return ToyChain(layers=tuple(layers), activation=self.chain.activation)


LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _weighted_mse(teacher: torch.Tensor, weights: torch.Tensor) -> LossFn:
    def loss(output: torch.Tensor, columns: torch.Tensor) -> torch.Tensor:
        diff = teacher[:, columns] - output
        return torch.sum(weights[columns] * torch.sum(diff * diff, dim=0))

    return loss


def _forward_kl(teacher_logits: torch.Tensor) -> LossFn:
    teacher_log_probs = F.log_softmax(teacher_logits, dim=0)

    def loss(output: torch.Tensor, columns: torch.Tensor) -> torch.Tensor:
        student_log_probs = F.log_softmax(output, dim=0)
        return F.kl_div(student_log_probs, teacher_log_probs[:, columns], reduction="sum", log_target=True)

    return loss


def _column_weights(weights: ArrayLike | None, columns: int) -> torch.Tensor:
    if weights is None:
        return torch.ones(columns, dtype=torch.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (columns,):
        raise DimensionMismatchError("column weights must have one entry per input column", {"weights": w.shape, "columns": columns})
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("column weights must be finite and nonnegative")
    return torch.tensor(w, dtype=torch.float64)


def _check_outputs(chain: ToyChain, X: DenseMatrix, teacher_outputs: DenseMatrix) -> None:
    if X.shape[0] != chain.in_dim:
        raise DimensionMismatchError("X rows do not match the chain input", {"rows": X.shape[0], "in_dim": chain.in_dim})
    expected = (chain.out_dim, X.shape[1])
    if teacher_outputs.shape != expected:
        raise DimensionMismatchError(
            "teacher outputs are not shaped like the chain output", {"expected": expected, "actual": teacher_outputs.shape}
        )


def _train(
    chain: ToyChain,
    X: DenseMatrix,
    loss_factory: Callable[[], LossFn],
    config: TuneConfig,
    *,
    train_dense: bool = False,
    train_latents: bool = False,
    train_scales: bool = False,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
    stage: str = "tune",
) -> tuple[ToyChain, list[float]]:
    generator = torch.Generator().manual_seed(config.seed)
    model = _TorchChain(chain, train_dense, train_latents, train_scales)
    params = model.parameters()
    inputs = torch.tensor(X, dtype=torch.float64)
    all_columns = torch.arange(X.shape[1])
    loss_fn = loss_factory()

    def full_loss() -> float:
        with torch.no_grad():
            return float(loss_fn(model.forward(inputs), all_columns))

    best_loss = full_loss()
    history = [best_loss]
    best_chain = chain
    if not math.isfinite(best_loss):
        raise NonFiniteLossError(f"{stage}: initial loss is not finite", checkpoint=chain)
    if best_loss == 0.0 or not params:
        return best_chain, history

    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    steps_per_epoch = math.ceil(X.shape[1] / config.batch_size)
    scheduler: torch.optim.lr_scheduler.LRScheduler | None = None
    if config.schedule is Schedule.COSINE:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs * steps_per_epoch)
    scales = model.scale_parameters()

    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(X.shape[1], generator=generator)
        for start in range(0, X.shape[1], config.batch_size):
            columns = order[start : start + config.batch_size]
            loss = loss_fn(model.forward(inputs[:, columns]), columns)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"{stage}: loss diverged", checkpoint=best_chain, context={"epoch": epoch, "best_loss": best_loss}
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            if scales:
                with torch.no_grad():
                    for tensor in scales:
                        tensor.clamp_(min=scale_floor)

        epoch_loss = full_loss()
        history.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            raise NonFiniteLossError(
                f"{stage}: loss diverged", checkpoint=best_chain, context={"epoch": epoch, "best_loss": best_loss}
            )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_chain = model.snapshot()
        logger.debug(f"{stage} epoch {epoch}/{config.epochs}: loss={epoch_loss:.6e} best={best_loss:.6e}")

    logger.info(f"{stage}: loss {history[0]:.6e} -> {best_loss:.6e} over {config.epochs} epochs")
    return best_chain, history


def block_loss(chain: ToyChain, X: ArrayLike, teacher_outputs: ArrayLike, weights: ArrayLike | None = None) -> float:
    """Σ_c w_c ‖teacher_c − chain(X)_c‖², evaluated exactly as the tuners do."""
    inputs = as_dense(X, "X")
    teacher = as_dense(teacher_outputs, "teacher_outputs")
    _check_outputs(chain, inputs, teacher)
    loss = _weighted_mse(torch.tensor(teacher, dtype=torch.float64), _column_weights(weights, inputs.shape[1]))
    model = _TorchChain(chain, False, False, False)
    with torch.no_grad():
        return float(loss(model.forward(torch.tensor(inputs, dtype=torch.float64)), torch.arange(inputs.shape[1])))


def kd_loss(student: ToyChain, teacher: ToyChain, X: ArrayLike) -> float:
    """Σ over columns of KL(softmax(teacher(X)) ‖ softmax(student(X)))."""
    inputs = as_dense(X, "X")
    teacher_logits = torch.tensor(forward_chain(teacher, inputs), dtype=torch.float64)
    model = _TorchChain(student, False, False, False)
    with torch.no_grad():
        return float(_forward_kl(teacher_logits)(model.forward(torch.tensor(inputs, dtype=torch.float64)), torch.arange(inputs.shape[1])))


def block_loss_gradients(
    chain: ToyChain, X: ArrayLike, teacher_outputs: ArrayLike, weights: ArrayLike | None = None
) -> tuple[float, list[dict[str, DenseMatrix]]]:
    """Loss and per-layer gradients of every parameter, with straight-through sign gradients."""
    inputs = as_dense(X, "X")
    teacher = as_dense(teacher_outputs, "teacher_outputs")
    _check_outputs(chain, inputs, teacher)
    model = _TorchChain(chain, True, True, True)
    loss_fn = _weighted_mse(torch.tensor(teacher, dtype=torch.float64), _column_weights(weights, inputs.shape[1]))
    loss = loss_fn(model.forward(torch.tensor(inputs, dtype=torch.float64)), torch.arange(inputs.shape[1]))
    loss.backward()
    grads = [
        {name: tensor.grad.numpy().copy() for name, tensor in layer.params.items() if tensor.grad is not None}
        for layer in model.layers
    ]
    return float(loss.detach()), grads


def ste_refine(
    chain: ToyChain,
    X: ArrayLike,
    teacher_outputs: ArrayLike,
    config: TuneConfig,
    weights: ArrayLike | None = None,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> ToyChain:
    """Tune latents and scales of every factorized layer; dense layers stay frozen."""
    inputs = as_dense(X, "X")
    teacher = as_dense(teacher_outputs, "teacher_outputs")
    _check_outputs(chain, inputs, teacher)
    w = _column_weights(weights, inputs.shape[1])
    t = torch.tensor(teacher, dtype=torch.float64)
    refined, _ = _train(
        chain, inputs, lambda: _weighted_mse(t, w), config,
        train_latents=True, train_scales=True, scale_floor=scale_floor, stage="ste_refine",
    )
    return refined


def mitigate_error_propagation(
    chain: ToyChain,
    X: ArrayLike,
    teacher_outputs: ArrayLike,
    config: TuneConfig,
    weights: ArrayLike | None = None,
) -> ToyChain:
    """Tune dense weights so they absorb upstream quantization error; factorized layers stay frozen."""
    if not any(isinstance(layer, DenseLayer) for layer in chain.layers):
        raise NoTunableLayersError("chain has no dense layers to tune", {"layers": len(chain.layers)})
    inputs = as_dense(X, "X")
    teacher = as_dense(teacher_outputs, "teacher_outputs")
    _check_outputs(chain, inputs, teacher)
    w = _column_weights(weights, inputs.shape[1])
    t = torch.tensor(teacher, dtype=torch.float64)
    tuned, _ = _train(chain, inputs, lambda: _weighted_mse(t, w), config, train_dense=True, stage="mitigate")
    return tuned


def tune_scales_kd(
    student: ToyChain,
    teacher: ToyChain,
    X: ArrayLike,
    config: TuneConfig,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> ToyChain:
    """Tune only s1 and s2 of every factorized layer against the teacher's output distribution."""
    inputs = as_dense(X, "X")
    if student.out_dim != teacher.out_dim or student.in_dim != teacher.in_dim:
        raise DimensionMismatchError(
            "student and teacher chains disagree on dimensions",
            {"student": (student.in_dim, student.out_dim), "teacher": (teacher.in_dim, teacher.out_dim)},
        )
    if inputs.shape[0] != student.in_dim:
        raise DimensionMismatchError("X rows do not match the chain input", {"rows": inputs.shape[0], "in_dim": student.in_dim})
    teacher_logits = torch.tensor(forward_chain(teacher, inputs), dtype=torch.float64)
    tuned, _ = _train(
        student, inputs, lambda: _forward_kl(teacher_logits), config,
        train_scales=True, scale_floor=scale_floor, stage="tune_scales_kd",
    )
    return tuned
