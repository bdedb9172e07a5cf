#!/usr/bin/env python3
"""
Test for image file I/O and manifests
"""

import numpy as np
import pytest
from PIL import Image

from core.errors import DataError, ShapeError
from core.imaging import (
    array_to_tensor,
    list_images,
    load_array,
    load_image,
    quantize,
    read_manifest,
    save_image,
    tensor_to_array,
    write_manifest,
)
from core.tensor import Tensor

from .conftest import write_rgb


class TestQuantization:
    """Test cases for the 8-bit level mapping"""

    def test_levels_map_exactly(self):
        pixels = np.array([[[0, 128, 255]]], dtype=np.uint8)
        t = array_to_tensor(pixels, dtype=np.float64)
        np.testing.assert_array_equal(t.data.ravel(), [0.0, 128 / 255, 1.0])

    def test_save_clamps(self):
        t = Tensor(np.array([1.7, -0.3, 0.5]).reshape(1, 3, 1, 1))
        np.testing.assert_array_equal(tensor_to_array(t)[0, 0], [255, 0, 128])

    def test_rounds_to_nearest_level(self):
        t = Tensor(np.array([0.4, 0.6, 254.4]).reshape(1, 3, 1, 1) / 255.0, dtype=np.float64)
        np.testing.assert_array_equal(tensor_to_array(t)[0, 0], [0, 1, 254])

    def test_quantize_matches_file_values(self, rng):
        t = Tensor(rng.random((1, 3, 4, 4)), dtype=np.float64)
        q = quantize(t)
        np.testing.assert_array_equal(q.data * 255, np.rint(q.data * 255))

    def test_wrong_layout(self):
        with pytest.raises(ShapeError):
            tensor_to_array(Tensor(np.zeros((2, 3, 4, 4))))
        with pytest.raises(ShapeError):
            array_to_tensor(np.zeros((4, 4), dtype=np.uint8))


class TestFiles:
    """Test cases for reading and writing image files"""

    def test_round_trip_is_bitwise(self, tmp_path):
        src = write_rgb(tmp_path / "in.png", 9, 13, seed=4)
        original = load_array(src)
        out = save_image(load_image(src, dtype=np.float32), tmp_path / "out" / "copy.png")
        np.testing.assert_array_equal(load_array(out), original)

    def test_shape_of_loaded_tensor(self, tmp_path):
        t = load_image(write_rgb(tmp_path / "x.png", 5, 7))
        assert t.shape == (1, 3, 5, 7)
        assert t.dtype == np.float32

    def test_grayscale_rejected(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        with pytest.raises(DataError, match="mode L"):
            load_array(path)

    def test_rgba_rejected(self, tmp_path):
        path = tmp_path / "rgba.png"
        Image.fromarray(np.zeros((4, 4, 4), dtype=np.uint8)).save(path)
        with pytest.raises(DataError):
            load_array(path)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not an image")
        with pytest.raises(DataError):
            load_array(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_array(tmp_path / "missing.png")

    def test_lossy_output_rejected(self, tmp_path):
        with pytest.raises(DataError):
            save_image(Tensor(np.zeros((1, 3, 2, 2))), tmp_path / "x.jpg")

    @pytest.mark.parametrize("suffix", [".jpg", ".webp"])
    def test_lossy_input_rejected(self, tmp_path, suffix):
        path = tmp_path / f"x{suffix}"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(path, format="PNG")
        with pytest.raises(DataError, match="input must be one of"):
            load_array(path)


class TestListing:
    """Test cases for directory listings and manifests"""

    def test_recursive_sorted_listing(self, image_dir):
        (image_dir / "notes.txt").write_text("skip")
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(image_dir / "lossy.jpg", format="PNG")
        assert [p.as_posix() for p in list_images(image_dir)] == ["a.png", "b.png", "sub/c.png"]

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(DataError):
            list_images(tmp_path / "missing")

    def test_manifest_round_trip(self, image_dir, tmp_path):
        manifest = write_manifest(list_images(image_dir)[1:], tmp_path / "lists" / "train.txt")
        assert [p.as_posix() for p in list_images(image_dir, manifest)] == ["b.png", "sub/c.png"]

    def test_manifest_skips_comments(self, image_dir, tmp_path):
        manifest = tmp_path / "m.txt"
        manifest.write_text("# held out\n\nsub/c.png\n", encoding="utf-8")
        assert [p.as_posix() for p in read_manifest(manifest, image_dir)] == ["sub/c.png"]

    @pytest.mark.parametrize("entry", ["../escape.png", "/etc/passwd"])
    def test_manifest_rejects_paths_outside(self, tmp_path, entry):
        manifest = tmp_path / "m.txt"
        manifest.write_text(entry + "\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_manifest(manifest)

    def test_manifest_entry_must_exist(self, image_dir, tmp_path):
        manifest = tmp_path / "m.txt"
        manifest.write_text("nope.png\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_manifest(manifest, image_dir)
