"""Model configuration, parameter containers and initialisation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from stam.autodiff import Tensor
from stam.errors import ConfigurationError

VARIANTS = ("cnn-only", "cnn+spatial", "full-stam")
SPATIAL_KERNEL = 7


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 4
    frame_size: tuple[int, int] = (32, 32)
    n_classes: int = 10
    widths: tuple[int, ...] = (8, 16, 32)
    n_heads: int = 10
    head_dim: Optional[int] = None
    variant: str = "full-stam"
    hidden: tuple[int, ...] = ()
    # fixed input standardisation (frame - offset) * scale applied before the backbone
    input_offset: float = 0.4
    input_scale: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_frames < 1:
            raise ConfigurationError("n_frames must be >= 1")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("backbone widths must be positive")
        if self.variant == "full-stam" and self.n_heads < 1:
            raise ConfigurationError("full-stam needs at least one temporal head")
        factor = 2 ** len(self.widths)
        height, width = self.frame_size
        if height % factor or width % factor:
            raise ConfigurationError(
                f"frame size {height}x{width} not divisible by {factor} "
                f"({len(self.widths)} 2x2 pooling stages)")
        h, w, _ = self.feature_shape
        if h < 2 or w < 2:
            raise ConfigurationError(f"feature map {h}x{w} too small; need at least 2x2")
        if self.head_dim is not None and not 1 <= self.head_dim <= self.widths[-1]:
            raise ConfigurationError("head_dim must lie in [1, c]")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        factor = 2 ** len(self.widths)
        return self.frame_size[0] // factor, self.frame_size[1] // factor, self.widths[-1]

    @property
    def tokens(self) -> int:
        h, w, _ = self.feature_shape
        return self.n_frames * h * w

    @property
    def proj_dim(self) -> int:
        c = self.widths[-1]
        return self.head_dim if self.head_dim is not None else max(1, c // 2)

    @property
    def has_spatial(self) -> bool:
        return self.variant != "cnn-only"

    @property
    def has_temporal(self) -> bool:
        return self.variant == "full-stam"

    def replace(self, **changes) -> "ModelConfig":
        data = asdict(self)
        data.update(changes)
        return ModelConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["frame_size"] = list(self.frame_size)
        data["widths"] = list(self.widths)
        data["hidden"] = list(self.hidden)
        return data


@dataclass
class ConvBlock:
    kernel: Tensor
    bias: Tensor


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # [7, 7, 2, 1]
    bias: Tensor    # [1]


@dataclass
class TemporalHeadParams:
    wq: Tensor  # [c, d]
    wk: Tensor  # [c, d]
    wv: Tensor  # [c, c]


@dataclass
class StamParams:
    config: ModelConfig
    backbone: list[ConvBlock]
    spatial: Optional[SpatialAttentionParams]
    heads: list[TemporalHeadParams]
    classifier: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.config.variant

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors under stable dotted names, in a fixed order."""
        out: list[tuple[str, Tensor]] = []
        for i, block in enumerate(self.backbone):
            out += [(f"backbone.{i}.kernel", block.kernel), (f"backbone.{i}.bias", block.bias)]
        if self.spatial is not None:
            out += [("spatial.kernel", self.spatial.kernel), ("spatial.bias", self.spatial.bias)]
        for i, head in enumerate(self.heads):
            out += [(f"heads.{i}.wq", head.wq), (f"heads.{i}.wk", head.wk), (f"heads.{i}.wv", head.wv)]
        for i, (weight, bias) in enumerate(self.classifier):
            out += [(f"classifier.{i}.weight", weight), (f"classifier.{i}.bias", bias)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "StamParams":
        return from_arrays(self.config, {k: t.data.copy() for k, t in self.named_tensors()})


def expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every tensor ``config`` calls for, in canonical order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    cin = 1
    for i, cout in enumerate(config.widths):
        shapes += [(f"backbone.{i}.kernel", (3, 3, cin, cout)), (f"backbone.{i}.bias", (cout,))]
        cin = cout
    c = config.widths[-1]
    if config.has_spatial:
        k = SPATIAL_KERNEL
        shapes += [("spatial.kernel", (k, k, 2, 1)), ("spatial.bias", (1,))]
    if config.has_temporal:
        d = config.proj_dim
        for i in range(config.n_heads):
            shapes += [(f"heads.{i}.wq", (c, d)), (f"heads.{i}.wk", (c, d)), (f"heads.{i}.wv", (c, c))]
    h, w, _ = config.feature_shape
    width = config.n_frames * h * w * c
    for i, units in enumerate(config.hidden + (config.n_classes,)):
        shapes += [(f"classifier.{i}.weight", (width, units)), (f"classifier.{i}.bias", (units,))]
        width = units
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".kernel"):
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def init_params(config: ModelConfig, seed: int = 0) -> StamParams:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``.

    ReLU-fed backbone kernels use the He bound sqrt(6 / fan_in); every other
    weight uses 1 / sqrt(fan_in), except the output layer, which starts at zero
    so that initial logits are uniform and no gate is pushed shut early on.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    output_layer = f"classifier.{len(config.hidden)}.weight"
    for name, shape in expected_shapes(config):
        if name.endswith("bias") or name == output_layer:
            arrays[name] = np.zeros(shape)
            continue
        fan_in = _fan_in(name, shape)
        bound = np.sqrt(6.0 / fan_in) if name.startswith("backbone") else 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return from_arrays(config, arrays)


def from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray],
                requires_grad: bool = True) -> StamParams:
    """Assemble :class:`StamParams` from named arrays (shapes must match ``config``)."""
    t = {name: Tensor(arrays[name], requires_grad=requires_grad)
         for name, _ in expected_shapes(config)}
    backbone = [ConvBlock(t[f"backbone.{i}.kernel"], t[f"backbone.{i}.bias"])
                for i in range(len(config.widths))]
    spatial = SpatialAttentionParams(t["spatial.kernel"], t["spatial.bias"]) if config.has_spatial else None
    heads = []
    if config.has_temporal:
        heads = [TemporalHeadParams(t[f"heads.{i}.wq"], t[f"heads.{i}.wk"], t[f"heads.{i}.wv"])
                 for i in range(config.n_heads)]
    classifier = [(t[f"classifier.{i}.weight"], t[f"classifier.{i}.bias"])
                  for i in range(len(config.hidden) + 1)]
    return StamParams(config, backbone, spatial, heads, classifier)


def count_params(params: StamParams) -> int:
    """Number of scalar learnables."""
    return int(sum(t.size for t in params.tensors()))
