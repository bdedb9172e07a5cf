#!/usr/bin/env python3
"""
Aligned LR/HR patch sampling, augmentation and dataset degradation
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .bicubic import resize_array
from .errors import ConfigError, DataError, ShapeError
from .imaging import list_images, load_array, save_image
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ImagePair:
    """LR input and HR target, both (n, 3, h, w), hr exactly ``scale`` times larger

    ``offset`` is the (top, left) HR crop corner before augmentation; the
    flags describe flip-then-rotate applied to both members.
    """
    lr: Tensor
    hr: Tensor
    source: str = ""
    offset: Tuple[int, int] = (0, 0)
    hflip: bool = False
    rot90_k: int = 0

    def __post_init__(self):
        lr, hr = self.lr.shape, self.hr.shape
        if len(lr) != 4 or len(hr) != 4 or lr[:2] != hr[:2]:
            raise ShapeError(f"ImagePair members must be (n, 3, h, w) with equal n and c: {lr} vs {hr}")
        if hr[2] % lr[2] or hr[3] % lr[3] or hr[2] // lr[2] != hr[3] // lr[3]:
            raise ShapeError(f"HR {hr[2:]} is not an integer multiple of LR {lr[2:]}")

    @property
    def scale(self) -> int:
        return self.hr.shape[2] // self.lr.shape[2]


def _to_levels(hr_image: Union[np.ndarray, Tensor]) -> np.ndarray:
    """(1, 3, H, W) float in [0, 1] from a tensor or (H, W, 3) uint8 pixels"""
    if isinstance(hr_image, Tensor):
        return np.asarray(hr_image.data, dtype=np.float64)
    arr = np.asarray(hr_image)
    if arr.dtype == np.uint8:
        return (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
    return arr.astype(np.float64)


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic downscale by 1/scale"""
    return resize_array(hr, Fraction(1, scale))


def sample_pair(hr_image: Union[np.ndarray, Tensor], patch: int, scale: int, rng: np.random.Generator,
                source: str = "", dtype=None) -> ImagePair:
    """Random HR crop aligned to the scale grid and its bicubic LR counterpart"""
    if patch < scale or patch % scale:
        raise ConfigError(f"Patch size {patch} must be a positive multiple of the scale {scale}")
    dtype = get_default_dtype() if dtype is None else dtype
    if isinstance(hr_image, np.ndarray) and hr_image.dtype == np.uint8:
        height, width = hr_image.shape[:2]
    else:
        height, width = _to_levels(hr_image).shape[2:]
    if height < patch or width < patch:
        raise DataError(f"Image {source or '?'} is {width}x{height}, smaller than the {patch}x{patch} patch")

    top = int(rng.integers(0, (height - patch) // scale + 1)) * scale
    left = int(rng.integers(0, (width - patch) // scale + 1)) * scale
    if isinstance(hr_image, np.ndarray) and hr_image.dtype == np.uint8:
        crop = _to_levels(hr_image[top:top + patch, left:left + patch])
    else:
        crop = _to_levels(hr_image)[:, :, top:top + patch, left:left + patch]
    lr = degrade(crop, scale)
    return ImagePair(Tensor(lr, dtype=dtype), Tensor(crop, dtype=dtype), source, (top, left))


def _transform(arr: np.ndarray, hflip: bool, rot90_k: int) -> np.ndarray:
    out = arr[..., ::-1] if hflip else arr
    return np.ascontiguousarray(np.rot90(out, rot90_k % 4, axes=(2, 3)))


def augment(pair: ImagePair, hflip: bool = False, rot90_k: int = 0) -> ImagePair:
    """Apply the same horizontal flip then rot90^k to both members

    The flags on the result describe the total transform from the original crop.
    """
    lr = Tensor(_transform(pair.lr.data, hflip, rot90_k), dtype=pair.lr.dtype)
    hr = Tensor(_transform(pair.hr.data, hflip, rot90_k), dtype=pair.hr.dtype)
    # rot^a flip^h rot^b flip^g == rot^(a + (-1)^h b) flip^(h xor g)
    k = (rot90_k + (-pair.rot90_k if hflip else pair.rot90_k)) % 4
    return replace(pair, lr=lr, hr=hr, hflip=pair.hflip != bool(hflip), rot90_k=k)


def random_augment(pair: ImagePair, rng: np.random.Generator) -> ImagePair:
    return augment(pair, bool(rng.integers(2)), int(rng.integers(4)))


def stack_pairs(pairs: Sequence[ImagePair]) -> ImagePair:
    """Concatenate single pairs along the batch axis"""
    if not pairs:
        raise DataError("Cannot build an empty batch")
    if len(pairs) == 1:
        return pairs[0]
    lr = np.concatenate([p.lr.data for p in pairs])
    hr = np.concatenate([p.hr.data for p in pairs])
    first = pairs[0]
    return ImagePair(Tensor(lr, dtype=first.lr.dtype), Tensor(hr, dtype=first.hr.dtype),
                     ",".join(p.source for p in pairs), first.offset, first.hflip, first.rot90_k)


def split_dataset(paths: Sequence[Path], val_count: int) -> Tuple[List[Path], List[Path]]:
    """Sorted paths split into (train, validation); the last ``val_count`` are held out"""
    ordered = sorted(paths, key=lambda p: Path(p).as_posix())
    if val_count < 0 or (val_count > 0 and val_count >= len(ordered)):
        raise DataError(f"Cannot hold out {val_count} of {len(ordered)} images")
    if val_count == 0:
        return ordered, []
    return ordered[:-val_count], ordered[-val_count:]


class PatchSampler:
    """Deterministic batch source over in-memory HR images

    Sample ``index`` of ``step`` draws from an RNG seeded with
    (seed, step, index), so batches do not depend on which thread builds them.
    """

    def __init__(self, images: Sequence[Tuple[str, np.ndarray]], patch: int, scale: int, seed: int = 0,
                 augment: bool = True, dtype=None):
        if not images:
            raise DataError("Training set is empty")
        self.logger = logging.getLogger(__name__)
        self.images = list(images)
        self.patch = patch
        self.scale = scale
        self.seed = seed
        self.augment = augment
        self.dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
        for name, pixels in self.images:
            if pixels.shape[0] < patch or pixels.shape[1] < patch:
                raise DataError(f"Image {name} is {pixels.shape[1]}x{pixels.shape[0]}, smaller than the {patch}x{patch} patch")

    @classmethod
    def from_directory(cls, hr_dir: PathLike, patch: int, scale: int, seed: int = 0,
                       manifest: Optional[PathLike] = None, val_count: int = 0, augment: bool = True,
                       dtype=None) -> "PatchSampler":
        root = Path(hr_dir)
        train, _ = split_dataset(list_images(root, manifest), val_count)
        if not train:
            raise DataError(f"No training images found in {root}")
        images = [(rel.as_posix(), load_array(root / rel)) for rel in train]
        logging.getLogger(__name__).info(f"Loaded {len(images)} training images from {root}")
        return cls(images, patch, scale, seed, augment, dtype)

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, step: int, index: int) -> ImagePair:
        rng = np.random.default_rng([self.seed, step, index])
        name, pixels = self.images[int(rng.integers(len(self.images)))]
        pair = sample_pair(pixels, self.patch, self.scale, rng, name, self.dtype)
        return random_augment(pair, rng) if self.augment else pair

    def batch(self, step: int, size: int) -> ImagePair:
        return stack_pairs([self.sample(step, i) for i in range(size)])


class FixedPairSource:
    """Serves the same pair every step, repeated to the batch size"""

    def __init__(self, pair: ImagePair):
        self.pair = pair

    def batch(self, step: int, size: int) -> ImagePair:
        return stack_pairs([self.pair] * size)


def center_pairs(hr_dir: PathLike, patch: int, scale: int, manifest: Optional[PathLike] = None,
                 val_count: int = 0, dtype=None) -> List[ImagePair]:
    """Center crops of the held-out images (or every image when val_count is 0)"""
    root = Path(hr_dir)
    train, val = split_dataset(list_images(root, manifest), val_count)
    pairs = []
    for rel in (val or train):
        pixels = load_array(root / rel)
        height, width = pixels.shape[:2]
        if height < patch or width < patch:
            raise DataError(f"Validation image {rel} is smaller than the {patch}x{patch} patch")
        top = (height - patch) // 2 // scale * scale
        left = (width - patch) // 2 // scale * scale
        crop = _to_levels(pixels[top:top + patch, left:left + patch])
        pairs.append(ImagePair(Tensor(degrade(crop, scale), dtype=dtype), Tensor(crop, dtype=dtype),
                               rel.as_posix(), (top, left)))
    return pairs


def degrade_directory(in_dir: PathLike, out_dir: PathLike, scale: int, manifest: Optional[PathLike] = None,
                      workers: int = 1) -> List[Path]:
    """Write a bicubic 1/scale copy of every image, mirroring the input tree

    Sides not divisible by ``scale`` lose their bottom/right remainder.
    """
    if scale < 1:
        raise ConfigError(f"Scale must be >= 1, got {scale}")
    src_root, dst_root = Path(in_dir), Path(out_dir)
    entries = list_images(src_root, manifest)
    if not entries:
        raise DataError(f"No images found in {src_root}")

    def _one(rel: Path) -> Path:
        pixels = load_array(src_root / rel)
        height, width = pixels.shape[:2]
        keep_h, keep_w = height - height % scale, width - width % scale
        if keep_h < scale or keep_w < scale:
            raise DataError(f"{rel} ({width}x{height}) is smaller than the scale {scale}")
        if (keep_h, keep_w) != (height, width):
            logger.warning(f"{rel}: cropping {width}x{height} to {keep_w}x{keep_h} to fit scale {scale}")
        lr = degrade(_to_levels(pixels[:keep_h, :keep_w]), scale)
        return save_image(lr, dst_root / rel)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        written = list(pool.map(_one, entries))
    logger.info(f"Degraded {len(written)} images by 1/{scale} into {dst_root}")
    return written
