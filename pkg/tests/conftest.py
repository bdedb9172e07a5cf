#!/usr/bin/env python3
"""
Shared fixtures: tiny model configs, seeded generators and image helpers
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.networks import GeneratorConfig, DiscriminatorConfig  # noqa: E402
from core.tensor import set_default_dtype, set_finite_checks  # noqa: E402


@pytest.fixture(autouse=True)
def runtime_defaults():
    """Every test starts in 32-bit mode with finite checks on"""
    set_default_dtype(np.float32)
    set_finite_checks(True)
    yield
    set_default_dtype(np.float32)
    set_finite_checks(True)


@pytest.fixture
def tiny_config():
    """x4 generator small enough for unit tests"""
    return GeneratorConfig(n_rrdb=1, n_rrfdb=1, rfb_per_rrfdb=2, base_channels=8, growth=4, scale=4)


@pytest.fixture
def tiny_disc_config():
    return DiscriminatorConfig(base_channels=4, max_channels=8, n_convs=4, min_input=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_rgb(path: Path, height: int, width: int, seed: int = 0) -> Path:
    """Random 8-bit RGB PNG"""
    pixels = np.random.default_rng(seed).integers(0, 256, (height, width, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path


@pytest.fixture
def image_dir(tmp_path):
    """Directory with three 32x32 RGB images"""
    root = tmp_path / "hr"
    for i, name in enumerate(("a.png", "b.png", "sub/c.png")):
        write_rgb(root / name, 32, 32, seed=i)
    return root
