#!/usr/bin/env python3
"""
Test for patch sampling, augmentation and dataset degradation
"""

from fractions import Fraction

import numpy as np
import pytest

from core.bicubic import resize_array
from core.dataset import (
    FixedPairSource,
    ImagePair,
    PatchSampler,
    augment,
    center_pairs,
    degrade,
    degrade_directory,
    sample_pair,
    split_dataset,
    stack_pairs,
)
from core.errors import ConfigError, DataError, ShapeError
from core.imaging import load_array
from core.tensor import Tensor

from .conftest import write_rgb


@pytest.fixture
def hr_pixels(rng):
    return rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)


@pytest.fixture
def pair(rng):
    hr = rng.random((1, 3, 16, 16))
    return ImagePair(Tensor(degrade(hr, 4), dtype=np.float64), Tensor(hr, dtype=np.float64), "p")


class TestImagePair:
    """Test cases for the pair contract"""

    def test_scale(self, pair):
        assert pair.scale == 4

    def test_rejects_non_multiple(self):
        with pytest.raises(ShapeError):
            ImagePair(Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros((1, 3, 8, 8))))

    def test_rejects_unequal_factors(self):
        with pytest.raises(ShapeError):
            ImagePair(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 8, 4))))


class TestSamplePair:
    """Test cases for aligned crops"""

    def test_lr_is_degraded_hr_crop(self, hr_pixels, rng):
        pair = sample_pair(hr_pixels, 16, 4, rng, "img", dtype=np.float64)
        top, left = pair.offset
        crop = hr_pixels[top:top + 16, left:left + 16].astype(np.float64).transpose(2, 0, 1)[None] / 255.0
        np.testing.assert_array_equal(pair.hr.data, crop)
        np.testing.assert_allclose(pair.lr.data, resize_array(crop, Fraction(1, 4)), atol=1e-12)
        assert pair.lr.shape == (1, 3, 4, 4)

    def test_offsets_are_scale_aligned(self, hr_pixels):
        rng = np.random.default_rng(0)
        for _ in range(20):
            top, left = sample_pair(hr_pixels, 16, 4, rng).offset
            assert top % 4 == 0 and left % 4 == 0
            assert 0 <= top <= 40 - 16 and 0 <= left <= 48 - 16

    def test_patch_must_be_multiple_of_scale(self, hr_pixels, rng):
        with pytest.raises(ConfigError):
            sample_pair(hr_pixels, 18, 4, rng)

    def test_image_smaller_than_patch(self, hr_pixels, rng):
        with pytest.raises(DataError):
            sample_pair(hr_pixels, 64, 4, rng)

    def test_accepts_tensor_input(self, rng):
        hr = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)
        assert sample_pair(hr, 16, 4, rng).hr.shape == (1, 3, 16, 16)


class TestAugment:
    """Test cases for paired flips and rotations"""

    def test_flip_is_an_involution(self, pair):
        twice = augment(augment(pair, hflip=True), hflip=True)
        np.testing.assert_array_equal(twice.hr.data, pair.hr.data)
        assert not twice.hflip

    def test_four_rotations_are_identity(self, pair):
        out = pair
        for _ in range(4):
            out = augment(out, rot90_k=1)
        np.testing.assert_array_equal(out.lr.data, pair.lr.data)
        assert out.rot90_k == 0

    @pytest.mark.parametrize("first,second", [((True, 1), (False, 2)), ((True, 3), (True, 1)), ((False, 1), (True, 0))])
    def test_flags_describe_total_transform(self, pair, first, second):
        composed = augment(augment(pair, *first), *second)
        direct = augment(pair, composed.hflip, composed.rot90_k)
        np.testing.assert_array_equal(composed.hr.data, direct.hr.data)

    @pytest.mark.parametrize("hflip,k", [(True, 0), (False, 1), (True, 3)])
    def test_preserves_degradation(self, pair, hflip, k):
        out = augment(pair, hflip, k)
        np.testing.assert_allclose(out.lr.data, degrade(out.hr.data, 4), atol=1e-10)


class TestBatches:
    """Test cases for batch sources"""

    def test_stack_pairs(self, pair):
        batch = stack_pairs([pair, pair, pair])
        assert batch.lr.shape == (3, 3, 4, 4)
        assert batch.hr.shape == (3, 3, 16, 16)

    def test_empty_batch(self):
        with pytest.raises(DataError):
            stack_pairs([])

    def test_fixed_source(self, pair):
        assert FixedPairSource(pair).batch(7, 2).hr.shape == (2, 3, 16, 16)

    def test_sampler_is_deterministic(self, hr_pixels):
        images = [("a", hr_pixels), ("b", hr_pixels[::-1].copy())]
        a = PatchSampler(images, 16, 4, seed=1).batch(5, 3)
        b = PatchSampler(images, 16, 4, seed=1).batch(5, 3)
        c = PatchSampler(images, 16, 4, seed=2).batch(5, 3)
        np.testing.assert_array_equal(a.hr.data, b.hr.data)
        assert not np.array_equal(a.hr.data, c.hr.data)

    def test_sampler_rejects_small_images(self, hr_pixels):
        with pytest.raises(DataError):
            PatchSampler([("a", hr_pixels)], 48, 4)
        with pytest.raises(DataError):
            PatchSampler([], 16, 4)

    def test_sampler_from_directory(self, image_dir):
        sampler = PatchSampler.from_directory(image_dir, 16, 4, val_count=1)
        assert len(sampler) == 2
        assert sampler.batch(1, 2).lr.shape == (2, 3, 4, 4)


class TestSplitAndValidation:
    """Test cases for held-out splits and validation crops"""

    def test_split_holds_out_last(self, tmp_path):
        paths = [tmp_path / n for n in ("c.png", "a.png", "b.png")]
        train, val = split_dataset(paths, 1)
        assert [p.name for p in train] == ["a.png", "b.png"]
        assert [p.name for p in val] == ["c.png"]

    def test_split_without_validation(self, tmp_path):
        train, val = split_dataset([tmp_path / "a.png"], 0)
        assert len(train) == 1 and val == []

    def test_split_cannot_take_everything(self, tmp_path):
        with pytest.raises(DataError):
            split_dataset([tmp_path / "a.png"], 1)

    def test_center_pairs(self, image_dir):
        pairs = center_pairs(image_dir, 16, 4, val_count=1, dtype=np.float64)
        assert [p.source for p in pairs] == ["sub/c.png"]
        assert pairs[0].offset == (8, 8)
        assert pairs[0].lr.shape == (1, 3, 4, 4)


class TestDegradeDirectory:
    """Test cases for whole-directory degradation"""

    def test_mirrors_tree(self, image_dir, tmp_path):
        written = degrade_directory(image_dir, tmp_path / "lr", 4, workers=2)
        assert sorted(p.relative_to(tmp_path / "lr").as_posix() for p in written) == ["a.png", "b.png", "sub/c.png"]
        assert load_array(tmp_path / "lr" / "sub" / "c.png").shape == (8, 8, 3)

    def test_crops_remainder(self, tmp_path):
        write_rgb(tmp_path / "in" / "odd.png", 18, 21)
        degrade_directory(tmp_path / "in", tmp_path / "out", 4)
        assert load_array(tmp_path / "out" / "odd.png").shape == (4, 5, 3)

    def test_values_match_bicubic(self, image_dir, tmp_path):
        degrade_directory(image_dir, tmp_path / "lr", 4)
        hr = load_array(image_dir / "a.png").astype(np.float64).transpose(2, 0, 1)[None] / 255.0
        expected = np.rint(np.clip(resize_array(hr, Fraction(1, 4)), 0, 1) * 255).astype(np.uint8)
        np.testing.assert_array_equal(load_array(tmp_path / "lr" / "a.png"), expected[0].transpose(1, 2, 0))

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError):
            degrade_directory(tmp_path / "empty", tmp_path / "out", 4)

    def test_too_small_for_scale(self, tmp_path):
        write_rgb(tmp_path / "in" / "tiny.png", 3, 3)
        with pytest.raises(DataError):
            degrade_directory(tmp_path / "in", tmp_path / "out", 4)
