#!/usr/bin/env python3
"""
Command-line surface: degrade, train, infer, ensemble, eval, gradcheck, params
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from .bicubic import bicubic_resize
from .checkpoint import apply_checkpoint, load_checkpoint, write_checkpoint
from .config import Config
from .dataset import PatchSampler, center_pairs, degrade_directory
from .diagnostics import RuntimeDiagnostics
from .ensemble import average_checkpoints, list_checkpoints, pixel_l1_scorer, select_top_checkpoints
from .errors import ConfigError, DataError, GradCheckFailure
from .gradcheck import block_cases, op_cases, run_gradcheck
from .imaging import list_images, load_image, save_image
from .metrics import evaluate
from .networks import (
    REFERENCE_PARAMETER_COUNT,
    build_discriminator,
    build_feature_extractor,
    build_generator,
    count_parameters,
)
from .optimizer import Stage
from .tensor import no_grad, set_default_dtype, set_finite_checks
from .trainer import train_gan_stage, train_psnr_stage
from .version import get_version_string

logger = logging.getLogger(__name__)

Command = Callable[[argparse.Namespace, Config], int]


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=36)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfbsr", description=get_version_string(), formatter_class=_formatter)
    parser.add_argument("--config", type=Path, default=None, help="JSON config file (defaults when omitted)")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="override logging.level")
    parser.add_argument("--threads", type=int, default=None, help="worker thread cap (runtime.threads)")
    parser.add_argument("--version", action="version", version=get_version_string())
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("degrade", help="bicubic-downscale a directory of HR images", formatter_class=_formatter)
    p.add_argument("--in", dest="in_dir", type=Path, required=True, help="HR image directory")
    p.add_argument("--out", dest="out_dir", type=Path, required=True, help="LR output directory")
    p.add_argument("--scale", type=int, default=None, help="downscale factor (model.scale)")
    p.add_argument("--manifest", type=Path, default=None, help="file of relative paths to process")

    p = sub.add_parser("train", help="run the PSNR or GAN training stage", formatter_class=_formatter)
    p.add_argument("--stage", choices=[s.value for s in Stage], default=None, help="train.stage")
    p.add_argument("--steps", type=int, default=None, help="train.steps (required by config or flag)")
    p.add_argument("--seed", type=int, default=None, help="train.seed")
    p.add_argument("--hr-dir", type=Path, default=None, help="data.hr_dir")
    p.add_argument("--out-dir", type=Path, default=None, help="train.out_dir")
    p.add_argument("--init-checkpoint", type=Path, default=None, help="train.init_checkpoint (GAN stage)")
    p.add_argument("--batch-size", type=int, default=None, help="train.batch_size")
    p.add_argument("--patch", type=int, default=None, help="data.patch (HR patch side)")
    p.add_argument("--checkpoint-every", type=int, default=None, help="train.checkpoint_every")
    p.add_argument("--lr", type=float, default=None, help="train.lr (initial learning rate)")

    p = sub.add_parser("infer", help="super-resolve every image of a directory", formatter_class=_formatter)
    p.add_argument("--checkpoint", type=Path, default=None, help="generator checkpoint (model method)")
    p.add_argument("--in", dest="in_dir", type=Path, required=True, help="LR image directory")
    p.add_argument("--out", dest="out_dir", type=Path, required=True, help="SR output directory")
    p.add_argument("--method", choices=["model", "bicubic"], default="model", help="upscaler")
    p.add_argument("--max-pixels", type=int, default=None, help="runtime.max_pixels output cap")
    p.add_argument("--force", action="store_true", help="load matching parameters despite a config mismatch")

    p = sub.add_parser("ensemble", help="average generator checkpoints", formatter_class=_formatter)
    p.add_argument("checkpoints", nargs="*", type=Path, help="checkpoint files to average")
    p.add_argument("--n", type=int, default=None, help="ensemble.n (number of models)")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.add_argument("--select-from", type=Path, default=None, help="rank every checkpoint in this directory")
    p.add_argument("--val-dir", type=Path, default=None, help="HR validation images for ranking")
    p.add_argument("--patch", type=int, default=None, help="validation patch side (data.patch)")

    p = sub.add_parser("eval", help="PSNR/SSIM table of SR images against HR", formatter_class=_formatter)
    p.add_argument("--sr", type=Path, required=True, help="SR image directory")
    p.add_argument("--hr", type=Path, required=True, help="HR image directory")
    p.add_argument("--crop", type=int, default=None, help="eval.crop center crop side, 0 for whole images")
    p.add_argument("--on-quantized", action="store_true", help="eval.on_quantized")
    p.add_argument("--out", type=Path, default=None, help="write the CSV here instead of stdout")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient suite", formatter_class=_formatter)
    p.add_argument("--instances", type=int, default=20, help="random instances per check")
    p.add_argument("--samples", type=int, default=24, help="elements checked per instance")
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.add_argument("--only", nargs="*", default=None, help="restrict to these check names")

    p = sub.add_parser("params", help="print the generator parameter count", formatter_class=_formatter)
    p.add_argument("--diagnostics", action="store_true", help="also print a host diagnostics report")
    return parser


def apply_overrides(args: argparse.Namespace, config: Config) -> None:
    """Fold flags into the config so the echoed config is the effective one"""
    mapping = {
        "log_level": "logging.level",
        "threads": "runtime.threads",
        "stage": "train.stage",
        "steps": "train.steps",
        "seed": "train.seed",
        "hr_dir": "data.hr_dir",
        "out_dir": "train.out_dir",
        "init_checkpoint": "train.init_checkpoint",
        "batch_size": "train.batch_size",
        "patch": "data.patch",
        "checkpoint_every": "train.checkpoint_every",
        "lr": "train.lr",
        "max_pixels": "runtime.max_pixels",
        "n": "ensemble.n",
        "select_from": "ensemble.select_from",
        "val_dir": "ensemble.val_dir",
        "crop": "eval.crop",
    }
    if args.command != "train":
        # infer and degrade use --out for their own output directory
        mapping.pop("out_dir")
    if args.command == "gradcheck":
        mapping.pop("seed")
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            config.set(key, str(value) if isinstance(value, Path) else value)
    if getattr(args, "on_quantized", False):
        config.set("eval.on_quantized", True)


def configure_runtime(config: Config) -> None:
    set_default_dtype(config.dtype)
    set_finite_checks(bool(config.get("runtime.finite_checks")))


# ---------------------------------------------------------------- commands

def cmd_degrade(args: argparse.Namespace, config: Config) -> int:
    scale = args.scale if args.scale is not None else int(config.get("model.scale"))
    degrade_directory(args.in_dir, args.out_dir, scale, args.manifest, workers=config.threads)
    return 0


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    RuntimeDiagnostics().log_summary("train")
    run = config.train_run()
    model_cfg = config.generator_config()
    hr_dir = config.get("data.hr_dir")
    if not hr_dir:
        raise ConfigError("data.hr_dir (or --hr-dir) is required for training")

    data = PatchSampler.from_directory(
        hr_dir, int(config.get("data.patch")), model_cfg.scale, run.seed,
        manifest=config.get("data.manifest"), val_count=int(config.get("data.val_count")),
        augment=bool(config.get("data.augment")),
    )
    generator = build_generator(model_cfg, run.seed)
    logger.info(f"Generator: {count_parameters(generator)} parameters")
    config.save(run.out_dir / "config.json")

    if run.stage is Stage.PSNR:
        result = train_psnr_stage(run, generator, data)
    else:
        discriminator = build_discriminator(config.discriminator_config(), run.seed + 1)
        extractor = build_feature_extractor(config.feature_config())
        result = train_gan_stage(run, generator, discriminator, extractor, data,
                                 init_checkpoint=config.get("train.init_checkpoint"))
    logger.info(f"Finished {result.steps} steps; {len(result.checkpoints)} checkpoints in {run.out_dir}")
    return 0


def cmd_infer(args: argparse.Namespace, config: Config) -> int:
    diagnostics = RuntimeDiagnostics()
    diagnostics.log_summary("infer")
    model_cfg = config.generator_config()
    scale = model_cfg.scale
    max_pixels = int(config.get("runtime.max_pixels"))
    generator = None
    if args.method == "model":
        if args.checkpoint is None:
            raise ConfigError("infer --method model needs --checkpoint")
        generator = build_generator(model_cfg, seed=0)
        apply_checkpoint(generator, load_checkpoint(args.checkpoint, model_cfg, args.force), args.force)

    entries = list_images(args.in_dir)
    if not entries:
        raise DataError(f"No images found in {args.in_dir}")
    for rel in entries:
        lr = load_image(args.in_dir / rel)
        out_h, out_w = lr.shape[2] * scale, lr.shape[3] * scale
        if out_h * out_w > max_pixels:
            raise DataError(f"{rel}: output {out_w}x{out_h} exceeds the {max_pixels}-pixel cap (--max-pixels)")
        required = diagnostics.estimate_inference_bytes(out_h, out_w, model_cfg.base_channels)
        for rec in diagnostics.recommendations(required):
            logger.warning(f"{rel}: {rec}")
        start = time.perf_counter()
        with no_grad():
            sr = generator(lr) if generator is not None else bicubic_resize(lr, scale, antialias=False)
        elapsed = time.perf_counter() - start
        target = save_image(sr, args.out_dir / rel.with_suffix(".png"))
        logger.info(f"{rel}: {lr.shape[3]}x{lr.shape[2]} -> {out_w}x{out_h} in {elapsed:.3f}s ({target})")
    return 0


def cmd_ensemble(args: argparse.Namespace, config: Config) -> int:
    n = int(config.get("ensemble.n"))
    select_from = config.get("ensemble.select_from")
    if select_from:
        val_dir = config.get("ensemble.val_dir")
        if not val_dir:
            raise ConfigError("ensemble --select-from needs --val-dir")
        model_cfg = config.generator_config()
        pairs = center_pairs(val_dir, int(config.get("data.patch")), model_cfg.scale)
        candidates = list_checkpoints(select_from)
        paths = select_top_checkpoints(candidates, pixel_l1_scorer(model_cfg, pairs), n)
    else:
        paths = list(args.checkpoints)
        if args.n is None:
            n = len(paths)
    for path in paths:
        if not Path(path).is_file():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
    write_checkpoint(average_checkpoints(paths, n), args.out)
    logger.info(f"Wrote ensemble of {n} checkpoints to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    table = evaluate(args.sr, args.hr, config.eval_protocol(), workers=config.threads)
    csv = table.to_csv()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(csv, encoding="utf-8")
    else:
        sys.stdout.write(csv)
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: Config) -> int:
    RuntimeDiagnostics().log_summary("gradcheck")
    if args.only:
        known = set(op_cases()) | set(block_cases()) | {"conv2d_oracle"}
        unknown = sorted(set(args.only) - known)
        if unknown:
            raise ConfigError(f"Unknown gradcheck names: {', '.join(unknown)}")
    report = run_gradcheck(args.instances, args.samples, args.seed, only=args.only, raise_on_failure=False)
    sys.stdout.write("\n".join(report.lines()) + "\n")
    if not report.passed:
        raise GradCheckFailure(f"Gradient check failed for: {', '.join(r.name for r in report.failures)}")
    return 0


def cmd_params(args: argparse.Namespace, config: Config) -> int:
    generator = build_generator(config.generator_config(), seed=0)
    count = count_parameters(generator)
    logger.info(f"Generator has {count} parameters (reference design: {REFERENCE_PARAMETER_COUNT / 1e6:.1f}M)")
    sys.stdout.write(f"{count}\n")
    if args.diagnostics:
        sys.stdout.write(RuntimeDiagnostics().generate_report() + "\n")
    return 0


COMMANDS: Dict[str, Command] = {
    "degrade": cmd_degrade,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def dispatch(args: argparse.Namespace, config: Config) -> int:
    configure_runtime(config)
    logger.info(f"Effective config: {config.to_json()}")
    return COMMANDS[args.command](args, config)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(list(argv) if argv is not None else None)
