# src/binfactor/accounting/shapes.py
"""Layer and model shapes, plus the shape configs shipped with the package."""

import logging
from dataclasses import dataclass, field
from importlib import resources

from ..utils.exceptions import ValidationError

logger = logging.getLogger(__name__)

HEAD_LAYER_NAME = "lm_head"


@dataclass(frozen=True, slots=True)
class LayerShape:
    name: str
    n: int
    m: int
    count: int = 1

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1 or self.count < 1:
            raise ValidationError(
                "layer shape fields must be positive", {"name": self.name, "n": self.n, "m": self.m, "count": self.count}
            )

    @property
    def params(self) -> int:
        return self.n * self.m * self.count


@dataclass(frozen=True, slots=True)
class ModelShape:
    name: str
    layers: tuple[LayerShape, ...]
    residual_fp16_params: int = 0
    # Output head that shares storage with the embedding table. Zero when untied.
    tied_head_params: int = 0
    description: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("a model shape needs at least one layer", {"name": self.name})
        if self.residual_fp16_params < 0 or self.tied_head_params < 0:
            raise ValidationError("residual parameter counts must be nonnegative", {"name": self.name})

    @property
    def quantized_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_params(self) -> int:
        return self.quantized_params + self.residual_fp16_params

    @property
    def head_params(self) -> int:
        head = sum(layer.params for layer in self.layers if layer.name == HEAD_LAYER_NAME)
        return head or self.tied_head_params

    def with_head_as_residual(self, store_tied_head: bool = False) -> "ModelShape":
        """
        Move the output head out of the quantized set and into the fp16 residual.

        A tied head already lives in the embedding table, so it only adds to the
        residual when ``store_tied_head`` asks for a separate copy.
        """
        kept = tuple(layer for layer in self.layers if layer.name != HEAD_LAYER_NAME)
        stored = self.head_params if store_tied_head or not self.tied_head_params else 0
        if len(kept) == len(self.layers) and not stored:
            return self
        return ModelShape(
            name=self.name,
            layers=kept,
            residual_fp16_params=self.residual_fp16_params + stored,
            description=self.description,
        )


def decoder_shape(
    name: str,
    hidden: int,
    intermediate: int,
    blocks: int,
    q_dim: int,
    kv_dim: int,
    vocab: int,
    quantize_head: bool = True,
) -> ModelShape:
    """
    Linear layers of a gated-MLP decoder stack.

    Attention projections and the three MLP projections repeat once per block.
    The embedding table is residual; the output head is either a quantized
    layer or (when tied to the embeddings) not stored separately.
    """
    layers = [
        LayerShape("q_proj", q_dim, hidden, blocks),
        LayerShape("k_proj", kv_dim, hidden, blocks),
        LayerShape("v_proj", kv_dim, hidden, blocks),
        LayerShape("o_proj", hidden, q_dim, blocks),
        LayerShape("gate_proj", intermediate, hidden, blocks),
        LayerShape("up_proj", intermediate, hidden, blocks),
        LayerShape("down_proj", hidden, intermediate, blocks),
    ]
    if quantize_head:
        layers.append(LayerShape(HEAD_LAYER_NAME, vocab, hidden, 1))
    return ModelShape(
        name=name,
        layers=tuple(layers),
        residual_fp16_params=vocab * hidden,
        tied_head_params=0 if quantize_head else vocab * hidden,
    )


SHIPPED_MODELS: tuple[str, ...] = (
    "L2-7", "L2-13", "L2-70",
    "L3-1", "L3-3", "L3-8", "L3-70", "L3-405",
    "G3-1", "G3-4", "G3-12", "G3-27",
    "Q3-0.6", "Q3-1.7", "Q3-4", "Q3-8", "Q3-14",
)


def shipped_shape_path(model: str) -> str:
    if model not in SHIPPED_MODELS:
        raise ValidationError("unknown shipped model shape", {"model": model, "known": ", ".join(SHIPPED_MODELS)})
    return str(resources.files("binfactor.accounting").joinpath("data", f"{model}.shape"))


def load_shipped_shape(model: str) -> ModelShape:
    from ..utils.file_formats import read_shape_config

    return read_shape_config(shipped_shape_path(model), name=model)
