#!/usr/bin/env python3
"""
Test for the binary checkpoint format
"""

import struct

import numpy as np
import pytest

from core.checkpoint import (
    CHECKSUM_SIZE,
    MAGIC,
    Checkpoint,
    apply_checkpoint,
    config_fingerprint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    sha256,
    write_checkpoint,
)
from core.errors import (
    CheckpointError,
    CheckpointMismatchError,
    ChecksumError,
    FingerprintMismatchError,
    FormatVersionError,
)
from core.networks import GeneratorConfig, build_generator


@pytest.fixture
def small_ckpt():
    return Checkpoint(b"\x01" * 32, {
        "b.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "a.bias": np.array([0.1, -0.2], dtype=np.float64),
    }, {"step": 7, "stage": "psnr", "seed": 1})


def _with_checksum(body: bytes) -> bytes:
    return body + sha256(body)[:CHECKSUM_SIZE]


class TestEncoding:
    """Test cases for encode/decode"""

    def test_round_trip_is_bitwise(self, small_ckpt):
        restored = decode_checkpoint(encode_checkpoint(small_ckpt))
        assert restored.fingerprint == small_ckpt.fingerprint
        assert restored.meta == small_ckpt.meta
        for name, arr in small_ckpt.tensors.items():
            assert restored.tensors[name].dtype == arr.dtype
            assert restored.tensors[name].tobytes() == arr.tobytes()

    def test_layout_header(self, small_ckpt):
        data = encode_checkpoint(small_ckpt)
        assert data.startswith(MAGIC)
        assert struct.unpack("<H", data[6:8]) == (1,)
        assert data[8:40] == small_ckpt.fingerprint

    def test_entries_sorted_by_name(self, small_ckpt):
        data = encode_checkpoint(small_ckpt)
        assert data.index(b"a.bias") < data.index(b"b.weight")

    def test_encoding_is_deterministic(self, small_ckpt):
        reordered = Checkpoint(small_ckpt.fingerprint, dict(reversed(list(small_ckpt.tensors.items()))),
                               dict(reversed(list(small_ckpt.meta.items()))))
        assert encode_checkpoint(reordered) == encode_checkpoint(small_ckpt)

    def test_bad_magic(self, small_ckpt):
        data = encode_checkpoint(small_ckpt)
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXXXX" + data[6:])

    @pytest.mark.parametrize("cut", [1, 9, 100])
    def test_truncation_fails_checksum(self, small_ckpt, cut):
        data = encode_checkpoint(small_ckpt)
        with pytest.raises(ChecksumError):
            decode_checkpoint(data[:-cut])

    def test_flipped_byte_fails_checksum(self, small_ckpt):
        data = bytearray(encode_checkpoint(small_ckpt))
        data[60] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode_checkpoint(bytes(data))

    def test_unknown_version(self, small_ckpt):
        body = encode_checkpoint(small_ckpt)[:-CHECKSUM_SIZE]
        body = body[:6] + struct.pack("<H", 99) + body[8:]
        with pytest.raises(FormatVersionError):
            decode_checkpoint(_with_checksum(body))

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError):
            encode_checkpoint(Checkpoint(b"\0" * 32, {"x": np.zeros(2, dtype=np.int32)}))

    def test_short_fingerprint(self):
        with pytest.raises(CheckpointError):
            encode_checkpoint(Checkpoint(b"\0" * 4))


class TestFiles:
    """Test cases for writing and loading checkpoint files"""

    def test_write_is_atomic_and_clean(self, small_ckpt, tmp_path):
        path = write_checkpoint(small_ckpt, tmp_path / "deep" / "x.ckpt")
        assert path.is_file()
        assert [p.name for p in path.parent.iterdir()] == ["x.ckpt"]
        assert read_checkpoint(path).meta["step"] == 7

    def test_failed_write_leaves_no_temp(self, small_ckpt, tmp_path, mocker):
        mocker.patch("core.checkpoint.os.replace", side_effect=OSError("disk full"))
        with pytest.raises(OSError):
            write_checkpoint(small_ckpt, tmp_path / "x.ckpt")
        assert list(tmp_path.iterdir()) == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_checkpoint(tmp_path / "nope.ckpt")

    def test_two_saves_identical(self, tiny_config, tmp_path):
        generator = build_generator(tiny_config, seed=0)
        a = save_checkpoint(generator, {"step": 1}, tmp_path / "a.ckpt", tiny_config)
        b = save_checkpoint(generator, {"step": 1}, tmp_path / "b.ckpt", tiny_config)
        assert a.read_bytes() == b.read_bytes()

    def test_generator_round_trip(self, tiny_config, tmp_path):
        source = build_generator(tiny_config, seed=1)
        target = build_generator(tiny_config, seed=2)
        path = save_checkpoint(source, {"step": 5, "stage": "psnr"}, tmp_path / "g.ckpt", tiny_config)
        ckpt = load_checkpoint(path, tiny_config)
        assert ckpt.fingerprint == config_fingerprint(tiny_config)
        loaded = apply_checkpoint(target, ckpt)
        assert loaded == sorted(source.state_dict())
        expected = source.state_dict()
        for name, arr in target.state_dict().items():
            assert arr.tobytes() == expected[name].tobytes()


class TestMismatch:
    """Test cases for loading into a different architecture"""

    @pytest.fixture
    def wide_config(self):
        return GeneratorConfig(n_rrdb=1, n_rrfdb=1, rfb_per_rrfdb=2, base_channels=12, growth=4, scale=4)

    def test_mismatch_names_first_parameter(self, tiny_config, wide_config, tmp_path):
        path = save_checkpoint(build_generator(tiny_config, seed=0), {}, tmp_path / "g.ckpt", tiny_config)
        with pytest.raises(CheckpointMismatchError) as excinfo:
            load_checkpoint(path, wide_config)
        assert excinfo.value.parameter
        assert excinfo.value.parameter in str(excinfo.value)

    def test_fingerprint_only_mismatch(self, tiny_config, tmp_path):
        other = GeneratorConfig(n_rrdb=1, n_rrfdb=1, rfb_per_rrfdb=2, base_channels=8, growth=4, scale=4,
                                residual_scale=0.1)
        path = save_checkpoint(build_generator(tiny_config, seed=0), {}, tmp_path / "g.ckpt", tiny_config)
        with pytest.raises(FingerprintMismatchError):
            load_checkpoint(path, other)

    def test_apply_is_all_or_nothing(self, tiny_config, wide_config, tmp_path):
        path = save_checkpoint(build_generator(tiny_config, seed=0), {}, tmp_path / "g.ckpt", tiny_config)
        ckpt = read_checkpoint(path)
        target = build_generator(wide_config, seed=3)
        before = {k: v.copy() for k, v in target.state_dict().items()}
        with pytest.raises(CheckpointMismatchError):
            apply_checkpoint(target, ckpt)
        after = target.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_force_loads_intersection(self, tiny_config, wide_config, tmp_path):
        path = save_checkpoint(build_generator(tiny_config, seed=0), {}, tmp_path / "g.ckpt", tiny_config)
        ckpt = load_checkpoint(path, wide_config, force=True)
        target = build_generator(wide_config, seed=3)
        loaded = apply_checkpoint(target, ckpt, force=True)
        assert 0 < len(loaded) < len(target.parameters())
        shapes = ckpt.shapes()
        assert all(shapes[name] == dict(target.named_parameters())[name].shape for name in loaded)
