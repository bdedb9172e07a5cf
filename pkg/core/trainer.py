#!/usr/bin/env python3
"""
PSNR-oriented and adversarial training loops
"""

import logging
import math
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Iterator, List, Optional, Protocol, Tuple, Union

from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .dataset import ImagePair
from .errors import ConfigError, TrainingDivergedError
from .losses import (
    LossReport,
    LossWeights,
    adversarial_loss_g,
    discriminator_loss,
    feature_loss,
    generator_loss,
    pixel_loss,
    relativistic_deltas,
)
from .networks import Discriminator, FeatureExtractor, Generator
from .optimizer import Adam, LrSchedule, Stage, lr_at
from .tensor import Tape, no_grad

logger = logging.getLogger(__name__)


class BatchSource(Protocol):
    """Anything that can build the batch for a given step"""

    def batch(self, step: int, size: int) -> ImagePair:
        ...


@dataclass
class TrainRun:
    """Settings of one training stage"""
    stage: Stage
    steps: int
    batch_size: int = 16
    checkpoint_every: int = 5000
    seed: int = 0
    out_dir: Path = Path("runs")
    weights: LossWeights = field(default_factory=LossWeights)
    lr: Optional[float] = None
    decay_every: Optional[int] = None
    milestones: Optional[Tuple[int, ...]] = None
    d_steps: int = 1
    g_steps: int = 1
    literal_fake: bool = False
    log_every: int = 1
    prefetch: int = 2
    threads: int = 1

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.out_dir = Path(self.out_dir)
        if self.steps is None or self.steps < 1:
            raise ConfigError("train.steps must be set to a positive number of steps")
        for name in ("batch_size", "checkpoint_every", "d_steps", "g_steps", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule.for_stage(self.stage, self.lr, self.decay_every, self.milestones)

    def checkpoint_path(self, step: int) -> Path:
        return self.out_dir / f"{self.stage.value}_{step:08d}.ckpt"


@dataclass
class TrainResult:
    checkpoints: List[Path] = field(default_factory=list)
    reports: List[LossReport] = field(default_factory=list)
    steps: int = 0


StepCallback = Callable[[int, LossReport], None]


class BatchPrefetcher:
    """Builds batches ahead of the trainer on worker threads

    Batches are yielded strictly in step order; each one depends only on its
    step, so the stream is identical for any worker count.
    """

    def __init__(self, source: BatchSource, batch_size: int, first_step: int, last_step: int,
                 depth: int = 2, workers: int = 1):
        self.source = source
        self.batch_size = batch_size
        self.first_step = first_step
        self.last_step = last_step
        self.depth = max(0, depth)
        self.workers = max(1, workers)

    def __iter__(self) -> Iterator[Tuple[int, ImagePair]]:
        if self.depth == 0:
            for step in range(self.first_step, self.last_step + 1):
                yield step, self.source.batch(step, self.batch_size)
            return

        pending: Deque[Tuple[int, Future]] = deque()
        next_step = self.first_step
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="batch") as pool:
            try:
                while pending or next_step <= self.last_step:
                    while next_step <= self.last_step and len(pending) < self.depth:
                        pending.append((next_step, pool.submit(self.source.batch, next_step, self.batch_size)))
                        next_step += 1
                    step, future = pending.popleft()
                    yield step, future.result()
            finally:
                for _, future in pending:
                    future.cancel()


def format_progress(step: int, lr: float, report: LossReport) -> str:
    return (f"step {step} lr {lr:.6g} l_pix {report.l_pix:.6g} l_feat {report.l_feat:.6g} "
            f"l_adv {report.l_adv:.6g} l_g {report.l_g:.6g} l_d {report.l_d:.6g}")


class _Loop:
    """Shared bookkeeping: schedule, cadence, logging and divergence handling"""

    def __init__(self, run: TrainRun, generator: Generator, on_step: Optional[StepCallback]):
        self.logger = logging.getLogger(__name__)
        self.run = run
        self.generator = generator
        self.on_step = on_step
        self.schedule = run.schedule
        self.result = TrainResult()
        self.last_checkpoint: Optional[Path] = None

    def batches(self, source: BatchSource) -> BatchPrefetcher:
        return BatchPrefetcher(source, self.run.batch_size, 1, self.run.steps, self.run.prefetch, self.run.threads)

    def lr(self, step: int) -> float:
        # lr for the update that completes ``step``; step 1 uses lr_at(0)
        return lr_at(self.schedule, step - 1)

    def finish_step(self, step: int, lr: float, report: LossReport) -> None:
        if not report.is_finite():
            raise TrainingDivergedError(f"Non-finite loss at step {step}: {report.to_dict()}")
        self.result.steps = step
        self.result.reports.append(report)
        if step % self.run.log_every == 0:
            self.logger.info(format_progress(step, lr, report))
        if self.on_step is not None:
            self.on_step(step, report)
        if step % self.run.checkpoint_every == 0:
            meta = {"step": step, "stage": self.run.stage.value, "seed": self.run.seed, "lr": lr}
            path = save_checkpoint(self.generator, meta, self.run.checkpoint_path(step), self.generator.config)
            self.last_checkpoint = path
            self.result.checkpoints.append(path)
            self.logger.info(f"Saved checkpoint {path}")

    def diverged(self, step: int, error: Exception) -> TrainingDivergedError:
        kept = self.last_checkpoint or "none"
        self.logger.error(f"Training diverged at step {step}: {error}; last good checkpoint: {kept}")
        return TrainingDivergedError(f"Training diverged at step {step} ({error}); last good checkpoint: {kept}")


def train_psnr_stage(run: TrainRun, generator: Generator, data: BatchSource,
                     on_step: Optional[StepCallback] = None) -> TrainResult:
    """Optimize pixel L1 only

    The report's l_g is lambda * l_pix; Adam is invariant to that constant factor.
    """
    loop = _Loop(run, generator, on_step)
    params = generator.parameters()
    optimizer = Adam(params, lr=loop.lr(1))
    logger.info(f"PSNR stage: {run.steps} steps, batch {run.batch_size}, {generator.count_parameters()} parameters")

    for step, batch in loop.batches(data):
        try:
            lr = optimizer.lr = loop.lr(step)
            with Tape() as tape:
                sr = generator(batch.lr)
                l_pix = pixel_loss(sr, batch.hr)
            tape.backward(l_pix, wrt=params)
            optimizer.step()
            value = l_pix.item()
            report = LossReport(l_pix=value, l_g=run.weights.lam * value)
            loop.finish_step(step, lr, report)
        except TrainingDivergedError as e:
            optimizer.zero_grad()
            raise loop.diverged(step, e) from e
    return loop.result


def discriminator_update(generator: Generator, discriminator: Discriminator, optimizer: Adam,
                         batch: ImagePair, literal_fake: bool = False) -> LossReport:
    """One D step on L_real + L_fake; generator parameters are untouched"""
    with no_grad():
        sr = generator(batch.lr)
    with Tape() as tape:
        d_hr = discriminator(batch.hr)
        d_sr = discriminator(sr)
        delta_real, delta_fake = relativistic_deltas(d_hr, d_sr)
        l_real, l_fake, l_d = discriminator_loss(delta_real, delta_fake, literal_fake)
    tape.backward(l_d, wrt=optimizer.params)
    optimizer.step()
    return LossReport(l_real=l_real.item(), l_fake=l_fake.item(), l_d=l_d.item(),
                      delta_real_mean=float(delta_real.data.mean()),
                      delta_fake_mean=float(delta_fake.data.mean()))


def generator_update(generator: Generator, discriminator: Discriminator, extractor: Optional[FeatureExtractor],
                     optimizer: Adam, batch: ImagePair, weights: LossWeights) -> LossReport:
    """One G step on lam * L_pix + L_feat + eta * L_adv; discriminator parameters are untouched"""
    with no_grad():
        d_hr = discriminator(batch.hr)
    with Tape() as tape:
        sr = generator(batch.lr)
        l_pix = pixel_loss(sr, batch.hr)
        l_feat = feature_loss(extractor, sr, batch.hr) if extractor is not None else None
        delta_real, delta_fake = relativistic_deltas(d_hr, discriminator(sr))
        l_adv = adversarial_loss_g(delta_real, delta_fake)
        l_g = generator_loss(weights, l_pix, l_feat, l_adv)
    tape.backward(l_g, wrt=optimizer.params)
    optimizer.step()
    return LossReport(l_pix=l_pix.item(), l_feat=l_feat.item() if l_feat is not None else 0.0,
                      l_adv=l_adv.item(), l_g=l_g.item(),
                      delta_real_mean=float(delta_real.data.mean()),
                      delta_fake_mean=float(delta_fake.data.mean()))


def train_gan_stage(run: TrainRun, generator: Generator, discriminator: Discriminator,
                    extractor: Optional[FeatureExtractor], data: BatchSource,
                    init_checkpoint: Optional[Union[str, Path]] = None,
                    on_step: Optional[StepCallback] = None) -> TrainResult:
    """Alternate ``d_steps`` discriminator updates and ``g_steps`` generator updates per iteration"""
    if init_checkpoint is not None:
        apply_checkpoint(generator, load_checkpoint(init_checkpoint, generator.config))
        logger.info(f"Initialized generator from {init_checkpoint}")
    else:
        logger.warning("GAN stage started without a PSNR-stage checkpoint")

    loop = _Loop(run, generator, on_step)
    g_opt = Adam(generator.parameters(), lr=loop.lr(1))
    d_opt = Adam(discriminator.parameters(), lr=loop.lr(1))
    logger.info(f"GAN stage: {run.steps} iterations, batch {run.batch_size}, "
                f"lambda {run.weights.lam} eta {run.weights.eta}")

    for step, batch in loop.batches(data):
        try:
            lr = loop.lr(step)
            g_opt.lr = d_opt.lr = lr
            for _ in range(run.d_steps):
                d_report = discriminator_update(generator, discriminator, d_opt, batch, run.literal_fake)
            for _ in range(run.g_steps):
                g_report = generator_update(generator, discriminator, extractor, g_opt, batch, run.weights)
            report = LossReport(
                l_pix=g_report.l_pix, l_feat=g_report.l_feat, l_adv=g_report.l_adv, l_g=g_report.l_g,
                l_real=d_report.l_real, l_fake=d_report.l_fake, l_d=d_report.l_d,
                delta_real_mean=d_report.delta_real_mean, delta_fake_mean=d_report.delta_fake_mean,
            )
            loop.finish_step(step, lr, report)
        except TrainingDivergedError as e:
            g_opt.zero_grad()
            d_opt.zero_grad()
            raise loop.diverged(step, e) from e
    return loop.result


def expected_checkpoints(total_steps: int, every: int) -> int:
    return math.floor(total_steps / every)
