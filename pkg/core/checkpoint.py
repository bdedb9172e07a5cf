#!/usr/bin/env python3
"""
Binary checkpoint format

    magic      6 bytes   b"RFBSR\\0"
    version    u16
    fingerprint 32 bytes SHA-256 of the canonical model config
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count      u32
    entries    count x (u16 name_len, name, u8 dtype tag, u8 rank, rank x u32 dims, payload)
    checksum   8 bytes   first 8 bytes of SHA-256 over everything above

All integers and payloads are little-endian; entries are sorted by name.
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from cryptography.hazmat.primitives import hashes

from .blocks import Module
from .errors import (
    CheckpointError,
    CheckpointMismatchError,
    ChecksumError,
    FingerprintMismatchError,
    FormatVersionError,
)
from .networks import GeneratorConfig, build_generator

logger = logging.getLogger(__name__)

MAGIC = b"RFBSR\0"
FORMAT_VERSION = 1
CHECKSUM_SIZE = 8
FINGERPRINT_SIZE = 32

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_FOR_DTYPE = {dtype: tag for tag, dtype in DTYPE_TAGS.items()}

PathLike = Union[str, Path]


def sha256(data: bytes) -> bytes:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize()


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def config_fingerprint(config: GeneratorConfig) -> bytes:
    """32-byte architecture fingerprint"""
    return sha256(canonical_json(config.to_dict()))


@dataclass
class Checkpoint:
    """Named parameter arrays plus metadata"""
    fingerprint: bytes
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: arr.shape for name, arr in self.tensors.items()}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.fingerprint) != FINGERPRINT_SIZE:
        raise CheckpointError(f"Fingerprint must be {FINGERPRINT_SIZE} bytes, got {len(ckpt.fingerprint)}")
    meta = canonical_json(ckpt.meta)
    parts = [MAGIC, struct.pack("<H", ckpt.version), ckpt.fingerprint,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in TAG_FOR_DTYPE:
            raise CheckpointError(f"Unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", TAG_FOR_DTYPE[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + sha256(body)[:CHECKSUM_SIZE]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("Checkpoint ends unexpectedly")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    header = len(MAGIC) + 2 + FINGERPRINT_SIZE
    if not MAGIC.startswith(data[:len(MAGIC)]):
        raise CheckpointError("Not a checkpoint file (bad magic)")
    if len(data) < header + CHECKSUM_SIZE:
        raise ChecksumError("Checkpoint is truncated")
    body, stored = data[:-CHECKSUM_SIZE], data[-CHECKSUM_SIZE:]
    if sha256(body)[:CHECKSUM_SIZE] != stored:
        raise ChecksumError("Checkpoint checksum mismatch (file truncated or corrupted)")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"Unknown checkpoint format version {version} (supported: {FORMAT_VERSION})")
    fingerprint = reader.take(FINGERPRINT_SIZE)
    (meta_len,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint metadata is not valid JSON: {e}")
    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype tag {tag} for {name}")
        shape = reader.unpack(f"<{rank}I")
        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape)
        if name in tensors:
            raise CheckpointError(f"Duplicate parameter name {name}")
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if reader.pos != len(body):
        raise CheckpointError("Trailing bytes after the last entry")
    return Checkpoint(fingerprint, tensors, meta, version)


def write_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    """Encode and write via a temp file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote checkpoint {path} ({len(ckpt.tensors)} tensors)")
    return path


def read_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def save_checkpoint(net: Module, meta: Dict[str, Any], path: PathLike, config: GeneratorConfig) -> Path:
    """Save every parameter of ``net`` with ``meta`` (step, stage, seed, ...)"""
    meta = dict(meta)
    meta.setdefault("model", config.to_dict())
    ckpt = Checkpoint(config_fingerprint(config), net.state_dict(), meta)
    return write_checkpoint(ckpt, path)


def _first_mismatch(expected: Dict[str, Tuple[int, ...]], found: Dict[str, Tuple[int, ...]]) -> Optional[Tuple[str, str]]:
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            return name, f"parameter {name} missing from checkpoint"
        if name not in expected:
            return name, f"unexpected parameter {name} in checkpoint"
        if expected[name] != found[name]:
            return name, f"parameter {name} has shape {found[name]}, expected {expected[name]}"
    return None


def expected_shapes(config: GeneratorConfig) -> Dict[str, Tuple[int, ...]]:
    generator = build_generator(config, seed=0)
    return {name: p.shape for name, p in generator.named_parameters()}


def load_checkpoint(path: PathLike, config: GeneratorConfig, force: bool = False) -> Checkpoint:
    """Read and validate a checkpoint against ``config``

    Without ``force`` a fingerprint mismatch is an error naming the first
    offending parameter; with it the checkpoint is returned for a partial load.
    """
    ckpt = read_checkpoint(path)
    if ckpt.fingerprint == config_fingerprint(config):
        return ckpt
    mismatch = _first_mismatch(expected_shapes(config), ckpt.shapes())
    if force:
        logger.warning(f"{path}: architecture fingerprint differs; forcing a name/shape intersection load")
        return ckpt
    if mismatch is not None:
        name, message = mismatch
        raise CheckpointMismatchError(f"{path}: {message}", parameter=name)
    raise FingerprintMismatchError(f"{path}: checkpoint was written for a different model config")


def apply_checkpoint(net: Module, ckpt: Checkpoint, force: bool = False) -> List[str]:
    """Copy checkpoint arrays into ``net``; all-or-nothing unless ``force``

    Returns the names that were loaded.
    """
    params = dict(net.named_parameters())
    expected = {name: p.shape for name, p in params.items()}
    if force:
        names = [n for n in sorted(params) if n in ckpt.tensors and ckpt.tensors[n].shape == expected[n]]
        skipped = len(params) - len(names)
        if skipped:
            logger.warning(f"Forced load: {len(names)} parameters loaded, {skipped} left at their initial values")
    else:
        mismatch = _first_mismatch(expected, ckpt.shapes())
        if mismatch is not None:
            name, message = mismatch
            raise CheckpointMismatchError(message, parameter=name)
        names = sorted(params)
    for name in names:
        params[name].assign(ckpt.tensors[name].astype(params[name].dtype, copy=False))
    return names


def checkpoint_meta(path: PathLike) -> Dict[str, Any]:
    return read_checkpoint(path).meta
