#!/usr/bin/env python3
"""
PSNR / SSIM and directory evaluation with a center-crop protocol
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError
from .imaging import list_images, load_array, quantize
from .tensor import Tensor

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

ImageLike = Union[Tensor, np.ndarray]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class EvalProtocol:
    """Scoring protocol; crop 0 scores whole images"""
    crop: int = 1000
    on_quantized: bool = False
    psnr_cap: float = PSNR_CAP

    def __post_init__(self):
        if self.crop < 0:
            raise ConfigError(f"eval.crop must be >= 0, got {self.crop}")
        if self.psnr_cap <= 0:
            raise ConfigError(f"eval.psnr_cap must be > 0, got {self.psnr_cap}")


def _as_chw(img: ImageLike) -> np.ndarray:
    """(c, h, w) float64 from (1, c, h, w) tensors/arrays, (c, h, w) arrays or (h, w, 3) uint8"""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.dtype == np.uint8:
        return data.astype(np.float64).transpose(2, 0, 1) / 255.0
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ShapeError(f"Metrics score one image at a time, got batch {data.shape[0]}")
        data = data[0]
    if data.ndim != 3:
        raise ShapeError(f"Expected an image of shape (c, h, w), got {data.shape}")
    return data.astype(np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Images differ in shape: {a.shape} vs {b.shape}")


def psnr(a: ImageLike, b: ImageLike, cap: float = PSNR_CAP) -> float:
    """10 * log10(1 / MSE) for images in [0, 1]; identical images give ``cap``"""
    x, y = _as_chw(a), _as_chw(b)
    _same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product"""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of the last two axes"""
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: ImageLike, b: ImageLike, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels"""
    x, y = _as_chw(a), _as_chw(b)
    _same_shape(x, y)
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[1:]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(np.mean(ssim_map.mean(axis=(1, 2))))


def center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    """Center ``crop`` x ``crop`` of a (c, h, w) array; 0 keeps the whole image"""
    if crop == 0:
        return img
    h, w = img.shape[1:]
    if crop > h or crop > w:
        raise ShapeError(f"Center crop {crop} does not fit a {w}x{h} image (use crop 0 for whole images)")
    top, left = (h - crop) // 2, (w - crop) // 2
    return img[:, top:top + crop, left:left + crop]


def score_pair(sr: ImageLike, hr: ImageLike, protocol: EvalProtocol = EvalProtocol()) -> Tuple[float, float]:
    """(psnr_db, ssim) of one image under ``protocol``"""
    if protocol.on_quantized and isinstance(sr, Tensor):
        sr = quantize(sr)
    x, y = _as_chw(sr), _as_chw(hr)
    _same_shape(x, y)
    x, y = center_crop(x, protocol.crop), center_crop(y, protocol.crop)
    return psnr(x, y, protocol.psnr_cap), ssim(x, y)


@dataclass
class EvalTable:
    """Per-image rows sorted by filename"""
    rows: List[Tuple[str, float, float]] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["filename,psnr_db,ssim"]
        lines += [f"{name},{p:.6f},{s:.6f}" for name, p, s in self.rows]
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        out = {name: {"psnr_db": p, "ssim": s} for name, p, s in self.rows}
        out["mean"] = {"psnr_db": self.mean_psnr, "ssim": self.mean_ssim}
        return out


def _match(sr_root: Path, hr_root: Path) -> List[Tuple[str, Path, Path]]:
    """Pair files by relative path without extension"""
    sr = {p.with_suffix("").as_posix(): p for p in list_images(sr_root)}
    hr = {p.with_suffix("").as_posix(): p for p in list_images(hr_root)}
    for key in sorted(set(sr) ^ set(hr)):
        side = hr_root if key in sr else sr_root
        raise DataError(f"No counterpart for {key} in {side}")
    if not sr:
        raise DataError(f"No images to evaluate in {sr_root}")
    return [(hr[key].as_posix(), sr_root / sr[key], hr_root / hr[key]) for key in sorted(sr)]


def evaluate(sr_dir: PathLike, hr_dir: PathLike, protocol: EvalProtocol = EvalProtocol(),
             workers: int = 1) -> EvalTable:
    """Score every SR image against its HR counterpart"""
    pairs = _match(Path(sr_dir), Path(hr_dir))

    def _one(item: Tuple[str, Path, Path]) -> Tuple[str, float, float]:
        name, sr_path, hr_path = item
        p, s = score_pair(load_array(sr_path), load_array(hr_path), protocol)
        logger.debug(f"{name}: psnr {p:.4f} dB, ssim {s:.4f}")
        return name, p, s

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(_one, pairs))
    table = EvalTable(rows)
    logger.info(f"Evaluated {len(rows)} images: mean psnr {table.mean_psnr:.4f} dB, mean ssim {table.mean_ssim:.4f}")
    return table
