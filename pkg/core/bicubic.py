#!/usr/bin/env python3
"""
Bicubic resampling compatible with Matlab's imresize defaults

Keys cubic kernel (a = -0.5), antialiasing when downscaling, replicate
edges by clamping source indices, and weights renormalized to sum to one
per output pixel. The resize is separable: rows first, then columns.
"""

import logging
import math
from fractions import Fraction
from typing import Tuple, Union

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

KEYS_A = -0.5
KERNEL_WIDTH = 4.0

ScaleLike = Union[int, float, Fraction, str]


def keys_kernel(x, a: float = KEYS_A) -> np.ndarray:
    """Keys piecewise cubic; support [-2, 2]"""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    outer = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def as_scale(scale: ScaleLike) -> Fraction:
    """Exact rational scale; accepts ints, floats, fractions and strings like '1/16'"""
    value = Fraction(scale).limit_denominator(1_000_000) if not isinstance(scale, Fraction) else scale
    if value <= 0:
        raise ValueError(f"Resize scale must be > 0, got {scale}")
    return value


def output_length(in_length: int, scale: ScaleLike) -> int:
    return math.ceil(in_length * as_scale(scale))


def contributions(in_length: int, scale: ScaleLike, antialias: bool = True) -> np.ndarray:
    """Dense (out_length, in_length) weight matrix for one axis"""
    s = as_scale(scale)
    out_length = output_length(in_length, s)
    if out_length < 1:
        raise ShapeError(f"Resize of length {in_length} by {s} gives an empty output")
    sf = float(s)
    stretch = antialias and sf < 1.0
    width = KERNEL_WIDTH / sf if stretch else KERNEL_WIDTH

    # 1-based output coordinates mapped into input space
    x = np.arange(1, out_length + 1, dtype=np.float64)
    u = x / sf + 0.5 * (1.0 - 1.0 / sf)
    left = np.floor(u - width / 2.0)
    taps = int(math.ceil(width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    distance = u[:, None] - indices
    weights = sf * keys_kernel(sf * distance) if stretch else keys_kernel(distance)
    weights = weights / weights.sum(axis=1, keepdims=True)

    clamped = np.clip(indices, 1, in_length).astype(np.int64) - 1
    matrix = np.zeros((out_length, in_length), dtype=np.float64)
    rows = np.repeat(np.arange(out_length), taps)
    np.add.at(matrix, (rows, clamped.reshape(-1)), weights.reshape(-1))
    return matrix


def resize_array(arr: np.ndarray, scale: ScaleLike, antialias: bool = True) -> np.ndarray:
    """Resize the last two axes of ``arr``; computed in 64-bit, returned at the input precision"""
    if arr.ndim < 2:
        raise ShapeError(f"Resize needs at least 2 dimensions, got {arr.shape}")
    s = as_scale(scale)
    if s == 1:
        return np.array(arr)
    h, w = arr.shape[-2:]
    rows = contributions(h, s, antialias)
    cols = contributions(w, s, antialias)
    data = np.asarray(arr, dtype=np.float64)
    out = np.einsum("oh,...hw->...ow", rows, data)
    out = np.einsum("pw,...ow->...op", cols, out)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    return out.astype(dtype, copy=False)


def bicubic_resize(img: Tensor, scale: ScaleLike, antialias: bool = True) -> Tensor:
    """Resize an (n, c, h, w) tensor by ``scale``; not differentiable"""
    if img.ndim != 4:
        raise ShapeError(f"bicubic_resize expects (n, c, h, w), got {img.shape}")
    return Tensor(resize_array(img.data, scale, antialias), dtype=img.dtype)


def downscale_shape(shape: Tuple[int, int], factor: int) -> Tuple[int, int]:
    return output_length(shape[0], Fraction(1, factor)), output_length(shape[1], Fraction(1, factor))
