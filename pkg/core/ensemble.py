#!/usr/bin/env python3
"""
Parameter-space averaging of generator checkpoints
"""

import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TypeVar, Union

import numpy as np

from .checkpoint import (
    Checkpoint,
    apply_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    sha256,
)
from .dataset import ImagePair
from .errors import CheckpointMismatchError, ConfigError, FingerprintMismatchError
from .networks import GeneratorConfig, build_generator
from .tensor import l1, no_grad

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
T = TypeVar("T")


def _check_compatible(reference: Checkpoint, other: Checkpoint, label: str) -> None:
    if other.fingerprint != reference.fingerprint:
        raise FingerprintMismatchError(f"{label}: architecture fingerprint differs from the first checkpoint")
    for name in sorted(set(reference.tensors) | set(other.tensors)):
        if name not in other.tensors:
            raise CheckpointMismatchError(f"{label}: missing parameter {name}", parameter=name)
        if name not in reference.tensors:
            raise CheckpointMismatchError(f"{label}: extra parameter {name}", parameter=name)
        a, b = reference.tensors[name], other.tensors[name]
        if a.shape != b.shape or a.dtype != b.dtype:
            raise CheckpointMismatchError(
                f"{label}: {name} is {b.dtype}{b.shape}, expected {a.dtype}{a.shape}", parameter=name
            )


def average(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean of compatible checkpoints

    Inputs are summed in a canonical order (step, then content digest) with a
    64-bit accumulator, so the result does not depend on the order given.
    """
    if not checkpoints:
        raise ConfigError("Cannot average zero checkpoints")
    for i, ckpt in enumerate(checkpoints[1:], start=1):
        _check_compatible(checkpoints[0], ckpt, f"checkpoint #{i}")

    ordered = sorted(checkpoints, key=lambda c: (c.step, sha256(encode_checkpoint(c))))
    count = len(ordered)
    tensors = {}
    for name, ref in ordered[0].tensors.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for ckpt in ordered:
            acc += ckpt.tensors[name]
        tensors[name] = (acc / count).astype(ref.dtype)

    first = ordered[0].meta
    meta = {
        "stage": "ensemble",
        "step": max(c.step for c in ordered),
        "seed": first.get("seed", 0),
        "n": count,
        "source_steps": [c.step for c in ordered],
    }
    if "model" in first:
        meta["model"] = first["model"]
    return Checkpoint(ordered[0].fingerprint, tensors, meta)


def average_checkpoints(paths: Sequence[PathLike], n: int) -> Checkpoint:
    """Average exactly ``n`` checkpoint files"""
    if n < 1:
        raise ConfigError(f"Ensemble size must be >= 1, got {n}")
    if len(paths) != n:
        raise ConfigError(f"Ensemble size {n} does not match the {len(paths)} checkpoints given")
    checkpoints = [read_checkpoint(p) for p in paths]
    result = average(checkpoints)
    logger.info(f"Averaged {n} checkpoints (steps {result.meta['source_steps']})")
    return result


def select_top_checkpoints(candidates: Sequence[T], score_fn: Callable[[T], float], n: int,
                           step_fn: Optional[Callable[[T], int]] = None) -> List[T]:
    """The ``n`` best candidates by score, best first; ties go to the later training step"""
    if n < 1:
        raise ConfigError(f"Selection size must be >= 1, got {n}")
    if len(candidates) < n:
        raise ConfigError(f"Need at least {n} candidates, got {len(candidates)}")
    step_fn = step_fn or (lambda c: read_checkpoint(c).step)
    scored = [(float(score_fn(c)), int(step_fn(c)), i, c) for i, c in enumerate(candidates)]
    scored.sort(key=lambda item: (-item[0], -item[1], item[2]))
    for score, step, _, candidate in scored[:n]:
        logger.debug(f"Selected {candidate} (score {score:.6g}, step {step})")
    return [item[3] for item in scored[:n]]


def list_checkpoints(directory: PathLike) -> List[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"Checkpoint directory not found: {root}")
    return sorted(root.glob("*.ckpt"))


def pixel_l1_scorer(config: GeneratorConfig, pairs: Sequence[ImagePair],
                    force: bool = False) -> Callable[[PathLike], float]:
    """Score = negative mean pixel L1 of the checkpoint's generator on held-out pairs"""
    if not pairs:
        raise ConfigError("The pixel-L1 scorer needs at least one validation pair")
    generator = build_generator(config, seed=0)

    def _score(path: PathLike) -> float:
        apply_checkpoint(generator, load_checkpoint(path, config, force), force)
        with no_grad():
            losses = [l1(generator(pair.lr), pair.hr).item() for pair in pairs]
        return -float(np.mean(losses))

    return _score
