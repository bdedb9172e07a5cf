#!/usr/bin/env python3
"""
8-bit RGB image files <-> (1, 3, h, w) tensors in [0, 1]
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, ShapeError
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

LOSSLESS_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff")

PathLike = Union[str, Path]


def load_array(path: PathLike) -> np.ndarray:
    """Raw (h, w, 3) uint8 pixels of a lossless RGB file"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Image not found: {path}")
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise DataError(f"{path}: input must be one of {', '.join(LOSSLESS_SUFFIXES)}")
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DataError(f"{path}: expected an 8-bit RGB image, got mode {img.mode}")
            return np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"Cannot read image {path}: {e}")


def array_to_tensor(pixels: np.ndarray, dtype=None) -> Tensor:
    """(h, w, 3) uint8 -> (1, 3, h, w) with level k mapped to k/255"""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"Expected (h, w, 3) pixels, got {pixels.shape}")
    dtype = get_default_dtype() if dtype is None else dtype
    levels = pixels.astype(np.float64) / 255.0
    return Tensor(levels.transpose(2, 0, 1)[None], dtype=dtype)


def tensor_to_array(t: Union[Tensor, np.ndarray]) -> np.ndarray:
    """(1, 3, h, w) -> (h, w, 3) uint8; clamps to [0, 1] and rounds to the nearest level, ties to even"""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"Expected a (1, 3, h, w) image tensor, got {data.shape}")
    levels = np.rint(np.clip(data[0].astype(np.float64), 0.0, 1.0) * 255.0)
    return levels.astype(np.uint8).transpose(1, 2, 0)


def load_image(path: PathLike, dtype=None) -> Tensor:
    return array_to_tensor(load_array(path), dtype)


def save_image(t: Union[Tensor, np.ndarray], path: PathLike) -> Path:
    """Write an 8-bit RGB file; the format must be lossless"""
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise DataError(f"{path}: output must be one of {', '.join(LOSSLESS_SUFFIXES)}")
    pixels = tensor_to_array(t)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    logger.debug(f"Saved {pixels.shape[1]}x{pixels.shape[0]} image to {path}")
    return path


def quantize(t: Tensor) -> Tensor:
    """Values as they would read back after save_image"""
    return array_to_tensor(tensor_to_array(t), t.dtype)


def list_images(directory: PathLike, manifest: Optional[PathLike] = None) -> List[Path]:
    """Relative paths of readable images under ``directory``, sorted

    With a manifest only the newline-delimited relative paths it lists are
    returned; blank lines and lines starting with '#' are ignored.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"Not a directory: {root}")
    if manifest is not None:
        return read_manifest(manifest, root)
    found = [p.relative_to(root) for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in LOSSLESS_SUFFIXES]
    return sorted(found, key=lambda p: p.as_posix())


def read_manifest(manifest: PathLike, root: Optional[PathLike] = None) -> List[Path]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"Manifest not found: {manifest}")
    entries = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rel = Path(line)
        if rel.is_absolute() or ".." in rel.parts:
            raise DataError(f"Manifest entries must be relative paths inside the data directory: {line}")
        if root is not None and not (Path(root) / rel).is_file():
            raise DataError(f"Manifest entry not found: {Path(root) / rel}")
        entries.append(rel)
    return entries


def write_manifest(paths: List[Path], manifest: PathLike) -> Path:
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    manifest.write_text("".join(f"{p.as_posix()}\n" for p in paths), encoding="utf-8")
    return manifest
