#!/usr/bin/env python3
"""
Generator, discriminator and feature extractors
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .blocks import (
    ConvLayer,
    Initializer,
    Module,
    RRDB,
    RRFDB,
    Sequential,
    StageSpec,
    UpsampleKind,
    UpsampleStage,
    audit_normalization_free,
    rfb_unit_factory,
)
from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    LEAKY_SLOPE,
    Tensor,
    conv2d,
    get_default_dtype,
    leaky_relu,
    max_pool2d,
    mean_spatial,
    relu,
)

logger = logging.getLogger(__name__)

# Parameter count quoted for the full-size reference model
REFERENCE_PARAMETER_COUNT = 20_500_000

UPSAMPLE_PRESETS = ("alternate", "nni_only", "spc_only", "literal")

PlanLike = Union[str, Sequence[Union[StageSpec, Dict[str, Any]]]]


def resolve_upsample_plan(plan: PlanLike, scale: int) -> Tuple[StageSpec, ...]:
    """Turn a preset name or explicit stage list into StageSpecs"""
    if isinstance(plan, str):
        if plan not in UPSAMPLE_PRESETS:
            raise ConfigError(f"Unknown upsample plan preset: {plan}")
        if scale < 2 or scale & (scale - 1):
            raise ConfigError(f"Upsample presets need a power-of-two scale, got {scale}")
        n_stages = int(math.log2(scale))
        specs = []
        for i in range(n_stages):
            if plan == "nni_only":
                kind = UpsampleKind.NNI
            elif plan == "spc_only":
                kind = UpsampleKind.SPC
            else:
                kind = UpsampleKind.NNI if i % 2 == 0 else UpsampleKind.SPC
            specs.append(StageSpec(kind, rfb=plan != "literal"))
        return tuple(specs)

    specs = []
    for entry in plan:
        if isinstance(entry, StageSpec):
            specs.append(entry)
            continue
        unknown = set(entry) - {"kind", "rfb"}
        if unknown:
            raise ConfigError(f"Unknown upsample stage keys: {sorted(unknown)}")
        try:
            kind = UpsampleKind(entry["kind"])
        except (KeyError, ValueError):
            raise ConfigError(f"Invalid upsample stage: {entry}")
        specs.append(StageSpec(kind, bool(entry.get("rfb", True))))
    return tuple(specs)


@dataclass
class GeneratorConfig:
    """Generator architecture"""
    n_rrdb: int = 16
    n_rrfdb: int = 8
    rfb_per_rrfdb: int = 5
    base_channels: int = 64
    growth: int = 32
    scale: int = 16
    upsample_plan: PlanLike = "alternate"
    residual_scale: float = 0.2
    rfb_scale: float = 1.0
    init_scale: float = 0.1
    leaky_slope: float = LEAKY_SLOPE
    use_rfb: bool = True
    in_channels: int = 3

    def __post_init__(self):
        for name in ("n_rrdb", "n_rrfdb", "rfb_per_rrfdb", "base_channels", "growth", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"model.leaky_slope must be in (0, 1), got {self.leaky_slope}")
        self.upsample_plan = resolve_upsample_plan(self.upsample_plan, self.scale)
        product = UpsampleStage.factor ** len(self.upsample_plan)
        if product != self.scale:
            raise ConfigError(
                f"model.scale={self.scale} does not match the upsample plan (stage product {product})"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_rrdb": self.n_rrdb,
            "n_rrfdb": self.n_rrfdb,
            "rfb_per_rrfdb": self.rfb_per_rrfdb,
            "base_channels": self.base_channels,
            "growth": self.growth,
            "scale": self.scale,
            "upsample_plan": [spec.to_dict() for spec in self.upsample_plan],
            "residual_scale": self.residual_scale,
            "rfb_scale": self.rfb_scale,
            "init_scale": self.init_scale,
            "leaky_slope": self.leaky_slope,
            "use_rfb": self.use_rfb,
            "in_channels": self.in_channels,
        }


@dataclass
class DiscriminatorConfig:
    """Discriminator stand-in: strided 3x3 conv stack with a linear head"""
    base_channels: int = 64
    max_channels: int = 512
    n_convs: int = 8
    min_input: int = 16
    leaky_slope: float = LEAKY_SLOPE
    in_channels: int = 3

    def __post_init__(self):
        if self.n_convs < 1 or self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError(f"Invalid discriminator config: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_channels": self.base_channels,
            "max_channels": self.max_channels,
            "n_convs": self.n_convs,
            "min_input": self.min_input,
            "leaky_slope": self.leaky_slope,
            "in_channels": self.in_channels,
        }


@dataclass
class FeatureConfig:
    """Feature extractor used by the perceptual loss"""
    kind: str = "random"
    weights: Optional[str] = None
    seed: int = 0
    channels: int = 16
    depth: int = 2

    def __post_init__(self):
        if self.kind not in ("random", "vgg", "none"):
            raise ConfigError(f"features.kind must be random, vgg or none, got {self.kind}")
        if self.kind == "vgg" and not self.weights:
            raise ConfigError("features.weights is required for the vgg extractor")


class Generator(Module):
    """first conv -> Trunk-a (RRDBs) -> Trunk-RFB (RRFDBs) -> RFB -> upsampling -> two final convs

    ``init`` is plain Kaiming; convs inside residual branches (RRDB, RRFDB and
    RFB units) draw from it scaled by ``config.init_scale``.
    """

    def __init__(self, config: GeneratorConfig, init: Initializer):
        super().__init__()
        self.config = config
        c = config.base_channels
        units = rfb_unit_factory(config.rfb_scale, config.leaky_slope, config.use_rfb)
        branch_init = init.scaled(config.init_scale)
        # PlainUnit has no shortcut and stays on the backbone scale
        unit_init = branch_init if config.use_rfb else init

        self.first_conv = self.add_module("first_conv", ConvLayer(config.in_channels, c, init))
        self.trunk_a = self.add_module("trunk_a", Sequential([
            (f"rrdb{i:02d}", RRDB(c, config.growth, branch_init, config.residual_scale, config.leaky_slope))
            for i in range(config.n_rrdb)
        ]))
        self.trunk_rfb = self.add_module("trunk_rfb", Sequential([
            (f"rrfdb{i:02d}", RRFDB(c, config.growth, branch_init, config.residual_scale, config.rfb_per_rrfdb,
                                    units))
            for i in range(config.n_rrfdb)
        ]))
        self.pre_upsample_rfb = self.add_module("pre_upsample_rfb", units(c, c, unit_init))
        self.upsample = self.add_module("upsample", Sequential([
            (f"stage{i}", UpsampleStage(spec, c, init, units, unit_init))
            for i, spec in enumerate(config.upsample_plan)
        ]))
        self.final_conv1 = self.add_module("final_conv1", ConvLayer(c, c, init))
        self.final_conv2 = self.add_module("final_conv2", ConvLayer(c, config.in_channels, init))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"Generator expects (n, {self.config.in_channels}, h, w), got {x.shape}")
        out = self.first_conv(x)
        out = self.trunk_a(out)
        out = self.trunk_rfb(out)
        out = self.pre_upsample_rfb(out)
        out = self.upsample(out)
        out = leaky_relu(self.final_conv1(out), self.config.leaky_slope)
        return self.final_conv2(out)


class Discriminator(Module):
    """VGG-style critic returning one raw logit per image, shape (n, 1, 1, 1)"""

    def __init__(self, config: DiscriminatorConfig, init: Initializer):
        super().__init__()
        self.config = config
        self.convs: List[ConvLayer] = []
        c_prev = config.in_channels
        for i in range(config.n_convs):
            c_out = min(config.base_channels * 2 ** (i // 2), config.max_channels)
            stride = 1 if i % 2 == 0 else 2
            self.convs.append(self.add_module(f"conv{i}", ConvLayer(c_prev, c_out, init, stride=stride)))
            c_prev = c_out
        self.linear = self.add_module("linear", ConvLayer(c_prev, 1, init, (1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"Discriminator expects (n, {self.config.in_channels}, h, w), got {x.shape}")
        if min(x.shape[2], x.shape[3]) < self.config.min_input:
            raise ShapeError(f"Discriminator input {x.shape[2]}x{x.shape[3]} below minimum {self.config.min_input}")
        out = x
        for conv in self.convs:
            out = leaky_relu(conv(out), self.config.leaky_slope)
        return self.linear(mean_spatial(out))


class FeatureExtractor(ABC):
    """Frozen feature map provider for the perceptual loss"""

    tap: str = ""

    @abstractmethod
    def extract(self, img: Tensor) -> Tensor:
        """Return the tap-point feature map of ``img``"""

    @abstractmethod
    def count_parameters(self) -> int:
        """Number of scalar weights"""

    def fingerprint(self) -> bytes:
        """Raw bytes of every weight in order, for freeze audits"""
        return b""


class ConvStackExtractor(FeatureExtractor):
    """Fixed conv/relu/pool stack; weights are plain tensors and never trained"""

    def __init__(self, layers: Sequence[Tuple[str, Optional[Tensor], Optional[Tensor]]], tap: str,
                 normalize: Optional[Tuple[Sequence[float], Sequence[float]]] = None):
        self.layers = list(layers)
        self.tap = tap
        self.n_pools = sum(1 for kind, _, _ in self.layers if kind == "pool")
        self._normalize = None
        if normalize is not None:
            mean, std = (np.asarray(v, dtype=np.float64) for v in normalize)
            dtype = next(w.dtype for kind, w, _ in self.layers if kind != "pool")
            weight = np.zeros((3, 3, 1, 1))
            weight[np.arange(3), np.arange(3), 0, 0] = 1.0 / std
            self._normalize = (Tensor(weight, dtype=dtype), Tensor(-mean / std, dtype=dtype))

    def extract(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or min(img.shape[2], img.shape[3]) < 2 ** self.n_pools * 2:
            raise ShapeError(f"Feature extractor needs spatial size >= {2 ** self.n_pools * 2}, got {img.shape}")
        out = img
        if self._normalize is not None:
            out = conv2d(out, self._normalize[0], self._normalize[1])
        for idx, (kind, weight, bias) in enumerate(self.layers):
            if kind == "pool":
                out = max_pool2d(out, 2)
                continue
            out = conv2d(out, weight, bias, 1, (weight.shape[2] // 2, weight.shape[3] // 2))
            if kind == "conv_relu":
                out = relu(out)
        return out

    def count_parameters(self) -> int:
        return sum(w.size + b.size for kind, w, b in self.layers if kind != "pool")

    def fingerprint(self) -> bytes:
        return b"".join(w.data.tobytes() + b.data.tobytes() for kind, w, b in self.layers if kind != "pool")


# VGG19 layout up to conv3_4; the tap is taken before the conv3_4 activation
VGG_LAYOUT = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), ("pool", 0, 0),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), ("pool", 0, 0),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256),
)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_vgg_extractor(weights_path: Union[str, Path], dtype=None) -> ConvStackExtractor:
    """Load VGG-style weights from an .npz holding ``<layer>.weight`` / ``<layer>.bias`` arrays"""
    dtype = get_default_dtype() if dtype is None else dtype
    path = Path(weights_path)
    if not path.exists():
        raise DataError(f"Feature extractor weights not found: {path}")
    layers = []
    with np.load(path) as archive:
        for i, (name, c_in, c_out) in enumerate(VGG_LAYOUT):
            if name == "pool":
                layers.append(("pool", None, None))
                continue
            try:
                weight = archive[f"{name}.weight"]
                bias = archive[f"{name}.bias"]
            except KeyError as e:
                raise DataError(f"Feature weights missing {e.args[0]} in {path}")
            if weight.shape != (c_out, c_in, 3, 3) or bias.shape != (c_out,):
                raise DataError(f"Feature weights {name} have shape {weight.shape}, expected {(c_out, c_in, 3, 3)}")
            kind = "conv" if i == len(VGG_LAYOUT) - 1 else "conv_relu"
            layers.append((kind, Tensor(weight, dtype=dtype), Tensor(bias, dtype=dtype)))
    logger.info(f"Loaded VGG-style feature extractor from {path} (tap conv3_4)")
    return ConvStackExtractor(layers, tap="conv3_4", normalize=(IMAGENET_MEAN, IMAGENET_STD))


def build_random_extractor(seed: int = 0, channels: int = 16, depth: int = 2, dtype=None) -> ConvStackExtractor:
    """Seeded random conv stack for desk-scale runs: depth x (conv, relu, pool) then a tap conv"""
    dtype = get_default_dtype() if dtype is None else dtype
    init = Initializer(np.random.default_rng(seed), 1.0, np.dtype(dtype))
    layers = []
    c_prev = 3
    for _ in range(depth):
        layers.append(("conv_relu", Tensor(init.conv_weight((channels, c_prev, 3, 3)), dtype=dtype),
                       Tensor(init.bias(channels), dtype=dtype)))
        layers.append(("pool", None, None))
        c_prev = channels
    layers.append(("conv", Tensor(init.conv_weight((channels, c_prev, 3, 3)), dtype=dtype),
                   Tensor(init.bias(channels), dtype=dtype)))
    return ConvStackExtractor(layers, tap=f"random_conv{depth + 1}")


def build_feature_extractor(config: FeatureConfig, dtype=None) -> Optional[FeatureExtractor]:
    """Extractor for the configured kind; None disables the feature loss"""
    if config.kind == "none":
        return None
    if config.kind == "vgg":
        return load_vgg_extractor(config.weights, dtype)
    return build_random_extractor(config.seed, config.channels, config.depth, dtype)


def _initializer(seed: int, weight_scale: float, dtype) -> Initializer:
    dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
    return Initializer(np.random.default_rng(seed), weight_scale, dtype)


def build_generator(config: GeneratorConfig, seed: int, dtype=None) -> Generator:
    """Seeded generator; Kaiming fan-in init, residual-branch convs scaled by ``config.init_scale``"""
    generator = Generator(config, _initializer(seed, 1.0, dtype))
    generator.assign_names()
    offending = audit_normalization_free(generator)
    if offending:
        raise ConfigError(f"Generator must be normalization free, found: {', '.join(offending)}")
    logger.debug(f"Built generator with {generator.count_parameters()} parameters (seed {seed})")
    return generator


def build_discriminator(config: DiscriminatorConfig, seed: int, dtype=None) -> Discriminator:
    discriminator = Discriminator(config, _initializer(seed, 1.0, dtype))
    discriminator.assign_names()
    return discriminator


def count_parameters(net: Union[Module, FeatureExtractor]) -> int:
    """Exact number of scalar parameters"""
    return net.count_parameters()


def generator_forward(generator: Generator, lr: Tensor) -> Tensor:
    """I_SR = G(I_LR); output is unbounded"""
    return generator(lr)


def discriminator_forward(discriminator: Discriminator, img: Tensor) -> Tensor:
    """Raw logits, one per batch item"""
    return discriminator(img)


def extract_features(extractor: FeatureExtractor, img: Tensor) -> Tensor:
    return extractor.extract(img)
