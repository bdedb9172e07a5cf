#!/usr/bin/env python3
"""
Adam optimizer and the two-stage learning-rate schedules
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDivergedError
from .tensor import Parameter

logger = logging.getLogger(__name__)

PSNR_INITIAL_LR = 2e-4
PSNR_DECAY_EVERY = 250_000
GAN_INITIAL_LR = 1e-4
GAN_MILESTONES = (50_000, 100_000, 200_000, 300_000)


class Stage(Enum):
    """Training stages"""
    PSNR = "psnr"
    GAN = "gan"


@dataclass(frozen=True)
class LrSchedule:
    """Step-function learning rate

    psnr stage: initial * 2^-(step // decay_every)
    gan stage: initial * 2^-(number of milestones <= step)
    """
    stage: Stage
    initial: float
    decay_every: int = PSNR_DECAY_EVERY
    milestones: Tuple[int, ...] = GAN_MILESTONES

    def __post_init__(self):
        if self.initial <= 0:
            raise ConfigError(f"Learning rate must be > 0, got {self.initial}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"Milestones must be ascending, got {self.milestones}")

    @classmethod
    def for_stage(cls, stage: Stage, lr: Optional[float] = None, decay_every: Optional[int] = None,
                  milestones: Optional[Sequence[int]] = None) -> "LrSchedule":
        """Stage defaults with optional overrides"""
        initial = lr if lr is not None else (PSNR_INITIAL_LR if stage is Stage.PSNR else GAN_INITIAL_LR)
        return cls(
            stage=stage,
            initial=float(initial),
            decay_every=int(decay_every or PSNR_DECAY_EVERY),
            milestones=tuple(int(m) for m in (milestones if milestones is not None else GAN_MILESTONES)),
        )


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate in effect at ``step``"""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.stage is Stage.PSNR:
        halvings = step // schedule.decay_every
    else:
        halvings = sum(1 for m in schedule.milestones if step >= m)
    return math.ldexp(schedule.initial, -halvings)


@dataclass
class AdamState:
    """Moments and step counter for one parameter group"""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


class Adam:
    """Bias-corrected Adam over a fixed parameter list

    A parameter whose gradient is entirely zero is left untouched, moments
    included; a step where every gradient is zero does not advance the counter.
    Gradients are zeroed after each step.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.logger = logging.getLogger(__name__)
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("Adam received the same parameter twice")
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.m = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]
        self.state.v = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        """Apply one update from the accumulated gradients"""
        for p in self.params:
            if p.grad.shape != p.shape:
                raise ShapeError(f"Gradient of {p.name or '?'} has shape {p.grad.shape}, expected {p.shape}")
            if not np.isfinite(p.grad).all():
                self.zero_grad()
                raise TrainingDivergedError(f"Non-finite gradient in parameter {p.name or '?'}")

        active = [i for i, p in enumerate(self.params) if np.any(p.grad)]
        if not active:
            return

        st = self.state
        st.step += 1
        correction1 = 1.0 - st.beta1 ** st.step
        correction2 = 1.0 - st.beta2 ** st.step
        for i in active:
            p = self.params[i]
            g = p.grad
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g
            m_hat = st.m[i] / correction1
            v_hat = st.v[i] / correction2
            update = st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
            p.assign((p.value.data - update).astype(p.dtype, copy=False))
        self.zero_grad()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()
