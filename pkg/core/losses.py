#!/usr/bin/env python3
"""
Training objectives: pixel L1, feature L1, relativistic adversarial terms
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple, Union

from .errors import ConfigError, ShapeError
from .networks import FeatureExtractor
from .tensor import Tensor, add, add_scalar, detach, l1, log, mean_all, neg, scale, sigmoid

logger = logging.getLogger(__name__)

Scalar = Union[Tensor, float]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective: lam * L_pix + L_feat + eta * L_adv"""
    lam: float = 10.0
    eta: float = 5e-3

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ConfigError(f"Loss weights must be >= 0, got lambda={self.lam} eta={self.eta}")


@dataclass
class LossReport:
    """Scalar loss values of one training step"""
    l_pix: float = 0.0
    l_feat: float = 0.0
    l_adv: float = 0.0
    l_g: float = 0.0
    l_real: float = 0.0
    l_fake: float = 0.0
    l_d: float = 0.0
    delta_real_mean: float = 0.5
    delta_fake_mean: float = 0.5

    def is_consistent(self, weights: LossWeights, rel: float = 1e-6) -> bool:
        """Check l_g and l_d against their components"""
        expected_g = weights.lam * self.l_pix + self.l_feat + weights.eta * self.l_adv
        expected_d = self.l_real + self.l_fake
        return (math.isclose(self.l_g, expected_g, rel_tol=rel, abs_tol=1e-12)
                and math.isclose(self.l_d, expected_d, rel_tol=rel, abs_tol=1e-12))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute difference between reconstruction and target"""
    if sr.shape != hr.shape:
        raise ShapeError(f"pixel_loss: sr {sr.shape} and hr {hr.shape} differ")
    return l1(sr, detach(hr))


def feature_loss(extractor: FeatureExtractor, sr: Tensor, hr: Tensor) -> Tensor:
    """L1 between extractor feature maps; only ``sr`` receives gradient"""
    if sr.shape != hr.shape:
        raise ShapeError(f"feature_loss: sr {sr.shape} and hr {hr.shape} differ")
    return l1(extractor.extract(sr), detach(extractor.extract(detach(hr))))


def _flat_logits(d: Tensor, name: str) -> Tensor:
    if d.ndim == 0 or d.shape[0] < 1:
        raise ShapeError(f"{name}: logits need a non-empty batch dimension, got {d.shape}")
    return d


def relativistic_deltas(d_hr: Tensor, d_sr: Tensor) -> Tuple[Tensor, Tensor]:
    """delta_real = sigmoid(d_hr - mean(d_sr)), delta_fake = sigmoid(d_sr - mean(d_hr))"""
    _flat_logits(d_hr, "relativistic_deltas")
    _flat_logits(d_sr, "relativistic_deltas")
    if d_hr.shape != d_sr.shape:
        raise ShapeError(f"relativistic_deltas: batch shapes differ {d_hr.shape} vs {d_sr.shape}")
    delta_real = sigmoid(add(d_hr, neg(mean_all(d_sr))))
    delta_fake = sigmoid(add(d_sr, neg(mean_all(d_hr))))
    return delta_real, delta_fake


def _one_minus(x: Tensor) -> Tensor:
    return add_scalar(neg(x), 1.0)


def adversarial_loss_g(delta_real: Tensor, delta_fake: Tensor) -> Tensor:
    """-E[log(1 - delta_real)] - E[log(delta_fake)]"""
    return neg(add(mean_all(log(_one_minus(delta_real))), mean_all(log(delta_fake))))


def discriminator_loss(delta_real: Tensor, delta_fake: Tensor,
                       literal_fake: bool = False) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (l_real, l_fake, l_d)

    ``literal_fake`` switches l_fake to the printed -E[1 - log(delta_fake)],
    which is unbounded below; the default is -E[log(1 - delta_fake)].
    """
    l_real = neg(mean_all(log(delta_real)))
    if literal_fake:
        l_fake = add_scalar(mean_all(log(delta_fake)), -1.0)
    else:
        l_fake = neg(mean_all(log(_one_minus(delta_fake))))
    return l_real, l_fake, add(l_real, l_fake)


def _as_tensor(value: Optional[Scalar], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(0.0 if value is None else value, dtype=like.dtype)


def generator_loss(weights: LossWeights, l_pix: Scalar, l_feat: Optional[Scalar] = None,
                   l_adv: Optional[Scalar] = None) -> Tensor:
    """lam * l_pix + l_feat + eta * l_adv; missing terms count as zero"""
    anchor = next((v for v in (l_pix, l_feat, l_adv) if isinstance(v, Tensor)), Tensor(0.0))
    total = scale(_as_tensor(l_pix, anchor), weights.lam)
    total = add(total, _as_tensor(l_feat, anchor))
    return add(total, scale(_as_tensor(l_adv, anchor), weights.eta))
