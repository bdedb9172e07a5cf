#!/usr/bin/env python3
"""
Parameterized building blocks: convolutions, dense blocks, RRDB, RFB, RRFDB
and the upsampling stages
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import (
    LEAKY_SLOPE,
    Parameter,
    Tensor,
    concat_channels,
    conv2d,
    leaky_relu,
    nearest_upsample,
    pixel_shuffle,
    relu,
    scale,
)

logger = logging.getLogger(__name__)

# (kh, kw, dilation) per conv; the first conv of a branch maps C_in -> inter
DEFAULT_RFB_BRANCHES: Tuple[Tuple[Tuple[int, int, int], ...], ...] = (
    ((1, 1, 1), (3, 3, 1)),
    ((1, 1, 1), (1, 3, 1), (3, 3, 3)),
    ((1, 1, 1), (3, 1, 1), (3, 3, 3)),
    ((1, 1, 1), (1, 3, 1), (3, 1, 1), (3, 3, 5)),
)

# Names that would indicate a normalization layer in the parameter tree
NORMALIZATION_MARKERS = ("bn", "batchnorm", "norm", "running_mean", "running_var", "gamma", "beta")


class Module:
    """Container of named parameters and child modules"""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, param: Parameter) -> Parameter:
        if name in self._params or name in self._children:
            raise ValueError(f"Duplicate member name: {name}")
        self._params[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        if name in self._params or name in self._children:
            raise ValueError(f"Duplicate member name: {name}")
        self._children[name] = module
        return module

    def child(self, name: str) -> "Module":
        return self._children[name]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """Yield (dotted name, parameter) in construction order"""
        for name, param in self._params.items():
            yield f"{prefix}{name}", param
        for name, module in self._children.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        """Stamp every parameter with its hierarchical name"""
        seen = set()
        for name, param in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"Parameter name not unique: {name}")
            seen.add(name)
            param.name = name

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def count_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copy of every parameter value keyed by dotted name"""
        return {name: np.array(param.value.data) for name, param in self.named_parameters()}

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Sequential(Module):
    """Named modules applied in order"""

    def __init__(self, modules: Sequence[Tuple[str, Module]] = ()):
        super().__init__()
        self.layers: List[Module] = [self.add_module(name, module) for name, module in modules]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, idx: int) -> Module:
        return self.layers[idx]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class Initializer:
    """Seeded Kaiming fan-in normal initialization"""

    rng: np.random.Generator
    weight_scale: float = 1.0
    dtype: np.dtype = np.dtype(np.float32)

    def conv_weight(self, shape: Tuple[int, int, int, int]) -> np.ndarray:
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
        weight = self.rng.standard_normal(shape) * std * self.weight_scale
        return weight.astype(self.dtype)

    def bias(self, channels: int) -> np.ndarray:
        return np.zeros(channels, dtype=self.dtype)

    def scaled(self, factor: float) -> "Initializer":
        """Same random stream, weights multiplied by ``factor``"""
        return replace(self, weight_scale=self.weight_scale * factor)


class ConvLayer(Module):
    """Conv2d with bias; padding defaults to spatial-size preserving"""

    def __init__(self, c_in: int, c_out: int, init: Initializer, kernel: Tuple[int, int] = (3, 3),
                 stride: int = 1, dilation: int = 1, pad: Optional[Tuple[int, int]] = None):
        super().__init__()
        kh, kw = kernel
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.dilation = (dilation, dilation)
        self.pad = pad if pad is not None else (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        self.weight = self.add_parameter("weight", Parameter(init.conv_weight((c_out, c_in, kh, kw))))
        self.bias = self.add_parameter("bias", Parameter(init.bias(c_out)))

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.value, self.bias.value, self.stride, self.pad, self.dilation)


def _check_channels(x: Tensor, expected: int, where: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} input channels, got shape {x.shape}")


class DenseBlock(Module):
    """Five densely connected 3x3 convs inside a scaled residual"""

    def __init__(self, channels: int, growth: int, init: Initializer, residual_scale: float = 0.2,
                 slope: float = LEAKY_SLOPE, depth: int = 5):
        super().__init__()
        self.channels = channels
        self.growth = growth
        self.residual_scale = residual_scale
        self.slope = slope
        self.convs: List[ConvLayer] = []
        for k in range(1, depth + 1):
            c_in = channels + (k - 1) * growth
            c_out = growth if k < depth else channels
            self.convs.append(self.add_module(f"conv{k}", ConvLayer(c_in, c_out, init)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "DenseBlock")
        features = [x]
        for k, conv in enumerate(self.convs, start=1):
            joined = concat_channels(features) if len(features) > 1 else x
            expected = self.channels + (k - 1) * self.growth
            if joined.shape[1] != expected:
                raise ShapeError(f"DenseBlock conv{k}: {joined.shape[1]} input channels, expected {expected}")
            out = conv(joined)
            if k < len(self.convs):
                features.append(leaky_relu(out, self.slope))
        return x + scale(out, self.residual_scale)


class RRDB(Module):
    """Residual in residual dense block: three dense blocks and an outer scaled residual"""

    def __init__(self, channels: int, growth: int, init: Initializer, residual_scale: float = 0.2,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.channels = channels
        self.residual_scale = residual_scale
        self.blocks = [
            self.add_module(f"dense{i}", DenseBlock(channels, growth, init, residual_scale, slope))
            for i in (1, 2, 3)
        ]

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "RRDB")
        out = x
        for block in self.blocks:
            out = block(out)
        return x + scale(out, self.residual_scale)


class _Branch(Module):
    """Chain of small-kernel convs; ReLU between convs, none after the dilated tail"""

    def __init__(self, c_in: int, inter: int, layout: Sequence[Tuple[int, int, int]], init: Initializer):
        super().__init__()
        self.convs: List[ConvLayer] = []
        for idx, (kh, kw, dilation) in enumerate(layout, start=1):
            source = c_in if idx == 1 else inter
            self.convs.append(self.add_module(f"conv{idx}", ConvLayer(source, inter, init, (kh, kw), dilation=dilation)))

    def forward(self, x: Tensor) -> Tensor:
        out = x
        for idx, conv in enumerate(self.convs, start=1):
            out = conv(out)
            if idx < len(self.convs):
                out = relu(out)
        return out


class RFB(Module):
    """Receptive field block without normalization

    Four parallel small-kernel branches with dilated 3x3 tails, concatenated,
    fused by a 1x1 conv, added to the shortcut and passed through LeakyReLU.
    """

    def __init__(self, c_in: int, c_out: int, init: Initializer, residual_scale: float = 1.0,
                 slope: float = LEAKY_SLOPE,
                 branches: Sequence[Sequence[Tuple[int, int, int]]] = DEFAULT_RFB_BRANCHES):
        super().__init__()
        for layout in branches:
            for kh, kw, _ in layout:
                if kh > 3 or kw > 3:
                    raise ValueError(f"RFB kernels must not exceed 3 in any dimension, got {kh}x{kw}")
        self.c_in = c_in
        self.c_out = c_out
        self.residual_scale = residual_scale
        self.slope = slope
        self.inter = max(c_in // 4, 1)
        self.branches = [
            self.add_module(f"branch{i}", _Branch(c_in, self.inter, layout, init))
            for i, layout in enumerate(branches)
        ]
        self.fuse = self.add_module("fuse", ConvLayer(self.inter * len(branches), c_out, init, (1, 1)))
        self.shortcut = None
        if c_in != c_out:
            self.shortcut = self.add_module("shortcut", ConvLayer(c_in, c_out, init, (1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "RFB")
        fused = self.fuse(concat_channels([branch(x) for branch in self.branches]))
        short = x if self.shortcut is None else self.shortcut(x)
        return leaky_relu(short + scale(fused, self.residual_scale), self.slope)


class PlainUnit(Module):
    """3x3 conv + LeakyReLU standing in for an RFB when RFBs are ablated"""

    def __init__(self, c_in: int, c_out: int, init: Initializer, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.slope = slope
        self.conv = self.add_module("conv", ConvLayer(c_in, c_out, init))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "PlainUnit")
        return leaky_relu(self.conv(x), self.slope)


UnitFactory = Callable[[int, int, Initializer], Module]


def rfb_unit_factory(residual_scale: float = 1.0, slope: float = LEAKY_SLOPE, use_rfb: bool = True) -> UnitFactory:
    """Build RFBs, or plain conv units for the no-RFB ablation"""
    def _make(c_in: int, c_out: int, init: Initializer) -> Module:
        if use_rfb:
            return RFB(c_in, c_out, init, residual_scale, slope)
        return PlainUnit(c_in, c_out, init, slope)
    return _make


class RRFDB(Module):
    """Residual of receptive field dense block: RFBs wired like a dense block"""

    def __init__(self, channels: int, growth: int, init: Initializer, residual_scale: float = 0.2,
                 n_units: int = 5, unit_factory: Optional[UnitFactory] = None):
        super().__init__()
        unit_factory = unit_factory or rfb_unit_factory()
        self.channels = channels
        self.growth = growth
        self.residual_scale = residual_scale
        self.units: List[Module] = []
        for k in range(1, n_units + 1):
            c_in = channels + (k - 1) * growth
            c_out = growth if k < n_units else channels
            self.units.append(self.add_module(f"rfb{k}", unit_factory(c_in, c_out, init)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "RRFDB")
        features = [x]
        for k, unit in enumerate(self.units, start=1):
            out = unit(concat_channels(features) if len(features) > 1 else x)
            if k < len(self.units):
                features.append(out)
        return x + scale(out, self.residual_scale)


class UpsampleKind(Enum):
    """Upsampling methods"""
    NNI = "nni"
    SPC = "spc"


@dataclass(frozen=True)
class StageSpec:
    """One x2 upsampling stage of the generator"""
    kind: UpsampleKind
    rfb: bool = True

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "rfb": self.rfb}


class UpsampleStage(Module):
    """x2 upsampling by nearest-neighbour or sub-pixel conv, optionally followed by an RFB"""

    factor = 2

    def __init__(self, spec: StageSpec, channels: int, init: Initializer,
                 unit_factory: Optional[UnitFactory] = None, unit_init: Optional[Initializer] = None):
        super().__init__()
        unit_factory = unit_factory or rfb_unit_factory()
        self.spec = spec
        self.channels = channels
        self.expand = None
        if spec.kind is UpsampleKind.SPC:
            self.expand = self.add_module("expand", ConvLayer(channels, channels * self.factor ** 2, init))
        self.unit = self.add_module("rfb", unit_factory(channels, channels, unit_init or init)) if spec.rfb else None

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "UpsampleStage")
        if self.spec.kind is UpsampleKind.NNI:
            out = nearest_upsample(x, self.factor)
        else:
            out = pixel_shuffle(self.expand(x), self.factor)
        return self.unit(out) if self.unit is not None else out


def audit_normalization_free(module: Module) -> List[str]:
    """Return parameter names that look like normalization layers"""
    offending = []
    for name, _ in module.named_parameters():
        parts = name.lower().split(".")
        if any(part in NORMALIZATION_MARKERS for part in parts):
            offending.append(name)
    return offending
