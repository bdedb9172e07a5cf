#!/usr/bin/env python3
"""
Gradient oracle suite: analytic gradients against central differences

Every differentiable op and block type is checked in 64-bit mode on random
instances. The loss of an instance is sum(out * R) for a fixed random R, so
every output element contributes. An element whose two evaluations land on
different branches of a piecewise op (a ReLU mask, a pooling winner) has no
valid central difference; it is replaced by another element and counted as
skipped.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .blocks import (
    RFB,
    RRDB,
    RRFDB,
    DenseBlock,
    Initializer,
    PlainUnit,
    StageSpec,
    UpsampleKind,
    UpsampleStage,
    rfb_unit_factory,
)
from .errors import GradCheckFailure
from .losses import adversarial_loss_g, discriminator_loss, relativistic_deltas
from .tensor import Parameter, Tape, Tensor, finite_diff_grad, no_grad, precision

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5
ABSOLUTE_FLOOR = 1e-8
MAX_DRAWS_PER_SAMPLE = 4
CONV_TOLERANCE = 1e-6

# Output of a case builder: a closure recomputing the output from the
# current parameter values, and the parameters to differentiate
Built = Tuple[Callable[[], Tensor], List[Parameter]]
Builder = Callable[[np.random.Generator], Built]

# (c_in, c_out, kh, kw, stride, dilation, size)
CONV_MATRIX = (
    (3, 4, 1, 1, 1, 1, 7),
    (3, 4, 1, 3, 1, 1, 7),
    (3, 4, 3, 1, 1, 1, 7),
    (3, 4, 3, 3, 1, 1, 7),
    (3, 4, 3, 3, 1, 3, 9),
    (3, 4, 3, 3, 1, 5, 13),
    (3, 4, 3, 3, 2, 1, 8),
    (2, 3, 1, 3, 2, 1, 9),
)


@dataclass
class CheckResult:
    name: str
    instances: int = 0
    checked: int = 0
    max_error: float = 0.0
    skipped: int = 0
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance and (self.checked > 0 or self.instances == 0)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name:<28} instances {self.instances:>3} checked {self.checked:>5} "
                f"skipped {self.skipped:>3} max_error {self.max_error:.3e} {status}")


@dataclass
class GradCheckReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        out = [r.line() for r in self.results]
        out.append(f"{len(self.results) - len(self.failures)}/{len(self.results)} checks passed in {self.seconds:.1f}s")
        return out


def relative_error(analytic: float, numeric: float, tol: float = DEFAULT_TOLERANCE) -> float:
    """|analytic - numeric| / |numeric|, the central difference being the oracle

    Below ABSOLUTE_FLOOR the comparison is absolute: the difference is rescaled
    so that the result is <= ``tol`` exactly when it is <= ABSOLUTE_FLOOR.
    """
    diff = abs(analytic - numeric)
    if abs(numeric) < ABSOLUTE_FLOOR:
        return diff * tol / ABSOLUTE_FLOOR
    return diff / abs(numeric)


# ---------------------------------------------------------------- inputs

def _param(rng: np.random.Generator, shape, low: Optional[float] = None, high: Optional[float] = None) -> Parameter:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, shape)
    return Parameter(np.asarray(data, dtype=np.float64))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> Parameter:
    magnitude = rng.uniform(margin, 1.0, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Parameter(magnitude * sign)


def _distinct(rng: np.random.Generator, shape, gap: float = 0.05) -> Parameter:
    """Values pairwise at least ``gap`` apart so max/abs kinks stay out of reach"""
    size = int(np.prod(shape))
    values = (rng.permutation(size) - size / 2.0) * gap
    return Parameter(values.reshape(shape))


# ---------------------------------------------------------------- cases

def _unary(op: Callable[[Tensor], Tensor], make=None) -> Builder:
    def build(rng):
        x = (make or (lambda r: _param(r, (2, 3, 4, 4))))(rng)
        return (lambda: op(x.value)), [x]
    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor], shape_y=(2, 3, 4, 4)) -> Builder:
    def build(rng):
        x, y = _param(rng, (2, 3, 4, 4)), _param(rng, shape_y)
        return (lambda: op(x.value, y.value)), [x, y]
    return build


def _conv_case(c_in, c_out, kh, kw, stride, dilation, size) -> Builder:
    def build(rng):
        x = _param(rng, (2, c_in, size, size))
        w = _param(rng, (c_out, c_in, kh, kw))
        b = _param(rng, (c_out,))
        pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        return (lambda: T.conv2d(x.value, w.value, b.value, stride, pad, dilation)), [x, w, b]
    return build


def _l1_case(rng):
    x = _distinct(rng, (2, 3, 4, 4))
    y = Parameter(x.value.data + np.where(rng.random(x.shape) < 0.5, -0.3, 0.3) * rng.uniform(0.5, 1.0, x.shape))
    return (lambda: T.l1(x.value, y.value)), [x, y]


def _concat_case(rng):
    xs = [_param(rng, (2, c, 3, 3)) for c in (1, 2, 3)]
    return (lambda: T.concat_channels([p.value for p in xs])), xs


def _scalar_add_case(rng):
    x, s = _param(rng, (2, 3, 4, 4)), _param(rng, ())
    return (lambda: T.add(x.value, s.value)), [x, s]


def _relativistic_case(rng):
    d_hr, d_sr = _param(rng, (4, 1, 1, 1)), _param(rng, (4, 1, 1, 1))

    def fn():
        delta_real, delta_fake = relativistic_deltas(d_hr.value, d_sr.value)
        _, _, l_d = discriminator_loss(delta_real, delta_fake)
        return T.add(adversarial_loss_g(delta_real, delta_fake), l_d)

    return fn, [d_hr, d_sr]


def _block_case(make_block, c_in: int, size: int = 6) -> Builder:
    def build(rng):
        init = Initializer(rng, 1.0, np.dtype(np.float64))
        block = make_block(init)
        x = _param(rng, (1, c_in, size, size))
        return (lambda: block(x.value)), [x] + block.parameters()
    return build


def op_cases() -> Dict[str, Builder]:
    cases: Dict[str, Builder] = {}
    for c_in, c_out, kh, kw, stride, dilation, size in CONV_MATRIX:
        name = f"conv2d_{kh}x{kw}_s{stride}_d{dilation}"
        cases[name] = _conv_case(c_in, c_out, kh, kw, stride, dilation, size)
    cases.update({
        "leaky_relu": _unary(T.leaky_relu, lambda r: _away_from_zero(r, (2, 3, 4, 4))),
        "relu": _unary(T.relu, lambda r: _away_from_zero(r, (2, 3, 4, 4))),
        "sigmoid": _unary(T.sigmoid),
        "neg": _unary(T.neg),
        "scale": _unary(lambda x: T.scale(x, 0.2)),
        "add_scalar": _unary(lambda x: T.add_scalar(x, 1.5)),
        "add": _binary(T.add),
        "add_scalar_tensor": _scalar_add_case,
        "mul": _binary(T.mul),
        "concat_channels": _concat_case,
        "mean_all": _unary(T.mean_all),
        "mean_spatial": _unary(T.mean_spatial),
        "l1": _l1_case,
        "log": _unary(T.log, lambda r: _param(r, (2, 3, 4, 4), 0.5, 2.0)),
        "nearest_upsample": _unary(lambda x: T.nearest_upsample(x, 2)),
        "pixel_shuffle": _unary(lambda x: T.pixel_shuffle(x, 2), lambda r: _param(r, (1, 8, 3, 3))),
        "pixel_unshuffle": _unary(lambda x: T.pixel_unshuffle(x, 2)),
        "max_pool2d": _unary(lambda x: T.max_pool2d(x, 2), lambda r: _distinct(r, (2, 3, 4, 4))),
        "relativistic_losses": _relativistic_case,
    })
    return cases


def block_cases() -> Dict[str, Builder]:
    units = rfb_unit_factory()
    return {
        "dense_block": _block_case(lambda init: DenseBlock(4, 2, init), 4),
        "rrdb": _block_case(lambda init: RRDB(4, 2, init), 4),
        "rfb": _block_case(lambda init: RFB(8, 8, init), 8),
        "rfb_shortcut": _block_case(lambda init: RFB(8, 4, init), 8),
        "plain_unit": _block_case(lambda init: PlainUnit(4, 4, init), 4),
        "rrfdb": _block_case(lambda init: RRFDB(8, 4, init, unit_factory=units), 8, 4),
        "upsample_nni": _block_case(lambda init: UpsampleStage(StageSpec(UpsampleKind.NNI), 4, init), 4, 4),
        "upsample_spc": _block_case(lambda init: UpsampleStage(StageSpec(UpsampleKind.SPC), 4, init), 4, 4),
    }


# ---------------------------------------------------------------- checking

def _pick(rng: np.random.Generator, params: Sequence[Parameter], count: int) -> List[Tuple[int, Tuple[int, ...]]]:
    picks = []
    for _ in range(count):
        pi = int(rng.integers(len(params)))
        shape = params[pi].shape
        idx = tuple(int(rng.integers(d)) for d in shape)
        picks.append((pi, idx))
    return picks


def oracle_gradient(loss: Callable[[], Tensor], p: Parameter, idx: Tuple[int, ...],
                    h: float = DEFAULT_STEP) -> Tuple[float, bool]:
    """Central difference of ``loss`` at one element of ``p``

    The flag is False when the two evaluations take different branches of a
    piecewise op; the difference is then not a derivative.
    """
    patterns: List[List[np.ndarray]] = []

    def shifted() -> Tensor:
        with T.record_branches() as log:
            out = loss()
        patterns.append(log)
        return out

    numeric = float(finite_diff_grad(shifted, p, h, [idx])[idx])
    upper, lower = patterns
    smooth = len(upper) == len(lower) and all(np.array_equal(a, b) for a, b in zip(upper, lower))
    return numeric, smooth


def check_instance(fn: Callable[[], Tensor], params: Sequence[Parameter], rng: np.random.Generator,
                   samples: int, h: float = DEFAULT_STEP,
                   tol: float = DEFAULT_TOLERANCE) -> Tuple[int, int, float]:
    """Return (elements checked, elements skipped at kinks, worst relative error) for one built case"""
    with no_grad():
        reference = fn()
    weights = Tensor(rng.standard_normal(reference.shape), dtype=np.float64)
    count = reference.size

    def loss() -> Tensor:
        return T.scale(T.mean_all(T.mul(fn(), weights)), count)

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        value = loss()
    tape.backward(value, wrt=params)

    worst = 0.0
    checked = skipped = 0
    for _ in range(samples * MAX_DRAWS_PER_SAMPLE):
        if checked == samples:
            break
        (pi, idx), = _pick(rng, params, 1)
        numeric, smooth = oracle_gradient(loss, params[pi], idx, h)
        if not smooth:
            skipped += 1
            continue
        checked += 1
        worst = max(worst, relative_error(float(params[pi].grad[idx]), numeric, tol))
    return checked, skipped, worst


def run_case(name: str, build: Builder, instances: int, samples: int, seed: int,
             tol: float = DEFAULT_TOLERANCE) -> CheckResult:
    result = CheckResult(name, tolerance=tol)
    rng = np.random.default_rng([seed, sum(name.encode())])
    with precision(np.float64):
        for _ in range(instances):
            fn, params = build(rng)
            checked, skipped, worst = check_instance(fn, params, rng, samples, tol=tol)
            result.instances += 1
            result.checked += checked
            result.skipped += skipped
            result.max_error = max(result.max_error, worst)
    return result


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: Tuple[int, int],
                     dilation: int) -> np.ndarray:
    """Nested-loop cross-correlation"""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    oh = (h + 2 * pad[0] - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad[1] - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b_i in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[b_i, c, i * stride + u * dilation, j * stride + v * dilation]
                    out[b_i, o, i, j] = acc
    return out


def run_conv_oracle(seed: int = 0, tol: float = CONV_TOLERANCE) -> CheckResult:
    """conv2d (both kernels) against the nested-loop reference"""
    result = CheckResult("conv2d_oracle", tolerance=tol)
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        for c_in, c_out, kh, kw, stride, dilation, size in CONV_MATRIX:
            x = rng.standard_normal((2, c_in, size, size))
            w = rng.standard_normal((c_out, c_in, kh, kw))
            b = rng.standard_normal(c_out)
            pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
            expected = conv2d_reference(x, w, b, stride, pad, dilation)
            with no_grad():
                lean = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dilation).data
            wp = Parameter(w)
            with Tape():
                recorded = T.conv2d(Tensor(x), wp.value, Tensor(b), stride, pad, dilation).data
            scale = max(np.abs(expected).max(), 1.0)
            for got in (lean, recorded):
                result.max_error = max(result.max_error, float(np.abs(got - expected).max() / scale))
                result.checked += expected.size
            result.instances += 1
    return result


def run_gradcheck(instances: int = 20, samples: int = 24, seed: int = 0, tol: float = DEFAULT_TOLERANCE,
                  only: Optional[Sequence[str]] = None, raise_on_failure: bool = True) -> GradCheckReport:
    """Run the conv oracle and every op/block gradient check"""
    start = time.perf_counter()
    report = GradCheckReport()
    cases = {**op_cases(), **block_cases()}
    selected = list(cases) if not only else [name for name in cases if name in set(only)]
    if not only or "conv2d_oracle" in only:
        report.results.append(run_conv_oracle(seed))
    for name in selected:
        result = run_case(name, cases[name], instances, samples, seed, tol)
        logger.info(result.line())
        report.results.append(result)
    report.seconds = time.perf_counter() - start

    if not report.passed:
        names = ", ".join(r.name for r in report.failures)
        logger.error(f"Gradient check failed for: {names}")
        if raise_on_failure:
            raise GradCheckFailure(f"Gradient check failed for: {names}")
    return report
