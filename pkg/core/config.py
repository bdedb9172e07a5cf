"""
Configuration management for the super-resolution toolkit
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import psutil

from .errors import ConfigError
from .losses import LossWeights
from .metrics import EvalProtocol
from .networks import DiscriminatorConfig, FeatureConfig, GeneratorConfig
from .optimizer import GAN_MILESTONES, PSNR_DECAY_EVERY, Stage
from .trainer import TrainRun


class Config:
    """Configuration manager backed by a JSON file

    Values from the file are merged over DEFAULT_CONFIG; keys that are not
    in DEFAULT_CONFIG are rejected.
    """

    DEFAULT_CONFIG = {
        "model": {
            "n_rrdb": 16,
            "n_rrfdb": 8,
            "rfb_per_rrfdb": 5,
            "base_channels": 64,
            "growth": 32,
            "scale": 16,
            "upsample_plan": "alternate",
            "residual_scale": 0.2,
            "rfb_scale": 1.0,
            "init_scale": 0.1,
            "leaky_slope": 0.2,
            "use_rfb": True
        },
        "discriminator": {
            "base_channels": 64,
            "max_channels": 512,
            "n_convs": 8,
            "min_input": 16
        },
        "features": {
            "kind": "random",
            "weights": None,
            "seed": 0,
            "channels": 16,
            "depth": 2
        },
        "loss": {
            "lambda": 10.0,
            "eta": 0.005,
            "literal_fake": False
        },
        "train": {
            "stage": "psnr",
            "steps": None,
            "batch_size": 16,
            "checkpoint_every": 5000,
            "seed": 0,
            "lr": None,
            "decay_every": PSNR_DECAY_EVERY,
            "milestones": list(GAN_MILESTONES),
            "d_steps": 1,
            "g_steps": 1,
            "init_checkpoint": None,
            "out_dir": "runs",
            "log_every": 100
        },
        "data": {
            "hr_dir": None,
            "patch": 512,
            "manifest": None,
            "val_count": 0,
            "augment": True,
            "prefetch": 2
        },
        "eval": {
            "crop": 1000,
            "on_quantized": False,
            "psnr_cap": 100.0
        },
        "ensemble": {
            "n": 10,
            "select_from": None,
            "val_dir": None
        },
        "logging": {
            "level": "INFO",
            "file": None,
            "max_size": 10485760,  # 10MB
            "backup_count": 5
        },
        "runtime": {
            "threads": None,
            "dtype": "float32",
            "finite_checks": True,
            "max_pixels": 67108864  # 8192 x 8192
        }
    }

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.config_file = Path(config_file) if config_file is not None else None
        self.logger = logging.getLogger(__name__)
        self._config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file, or the defaults when no file is given"""
        if self.config_file is None:
            return copy.deepcopy(self.DEFAULT_CONFIG)
        if not self.config_file.is_file():
            raise ConfigError(f"Config file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_file} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"{self.config_file}: top level must be an object")
        return self._merge_configs(self.DEFAULT_CONFIG, user)

    def _merge_configs(self, default: Dict, user: Dict, prefix: str = "") -> Dict:
        """Merge user config with defaults, rejecting unknown keys"""
        result = copy.deepcopy(default)
        for key, value in user.items():
            dotted = f"{prefix}{key}"
            if key not in result:
                raise ConfigError(f"Unknown config key: {dotted}")
            if isinstance(result[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Config section {dotted} must be an object")
                result[key] = self._merge_configs(result[key], value, f"{dotted}.")
            else:
                result[key] = value
        return result

    def _save_config(self, config: Dict[str, Any], path: Path) -> None:
        """Save configuration to file"""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(config, f, indent=4, ensure_ascii=False, sort_keys=True)

    def get(self, key_path: str, default=None):
        """Get configuration value by dot-separated path"""
        value = self._config
        for key in key_path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value: Any) -> None:
        """Set an existing configuration value by dot-separated path"""
        keys = key_path.split('.')
        config = self._config
        for key in keys[:-1]:
            if not isinstance(config.get(key), dict):
                raise ConfigError(f"Unknown config key: {key_path}")
            config = config[key]
        if keys[-1] not in config or isinstance(config[keys[-1]], dict):
            raise ConfigError(f"Unknown config key: {key_path}")
        config[keys[-1]] = value

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Save current configuration to ``path`` (default: the file it was loaded from)"""
        target = Path(path) if path is not None else self.config_file
        if target is None:
            raise ConfigError("No path to save the configuration to")
        self._save_config(self._config, target)
        return target

    def as_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    def to_json(self) -> str:
        """Effective configuration, sorted keys, one line"""
        return json.dumps(self._config, sort_keys=True)

    # ------------------------------------------------------------ typed views

    def _build(self, cls, section: str, **values):
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Invalid {section} section: {e}")

    def generator_config(self) -> GeneratorConfig:
        return self._build(GeneratorConfig, "model", **self.get("model"))

    def discriminator_config(self) -> DiscriminatorConfig:
        return self._build(DiscriminatorConfig, "discriminator", **self.get("discriminator"))

    def feature_config(self) -> FeatureConfig:
        return self._build(FeatureConfig, "features", **self.get("features"))

    def loss_weights(self) -> LossWeights:
        return self._build(LossWeights, "loss", lam=float(self.get("loss.lambda")), eta=float(self.get("loss.eta")))

    def train_run(self) -> TrainRun:
        train = self.get("train")
        try:
            stage = Stage(train["stage"])
        except ValueError:
            raise ConfigError(f"train.stage must be psnr or gan, got {train['stage']}")
        milestones = train["milestones"]
        return self._build(
            TrainRun, "train",
            stage=stage,
            steps=train["steps"],
            batch_size=int(train["batch_size"]),
            checkpoint_every=int(train["checkpoint_every"]),
            seed=int(train["seed"]),
            out_dir=Path(train["out_dir"]),
            weights=self.loss_weights(),
            lr=train["lr"],
            decay_every=train["decay_every"],
            milestones=tuple(milestones) if milestones is not None else None,
            d_steps=int(train["d_steps"]),
            g_steps=int(train["g_steps"]),
            literal_fake=bool(self.get("loss.literal_fake")),
            log_every=int(train["log_every"]),
            prefetch=int(self.get("data.prefetch")),
            threads=self.threads,
        )

    def eval_protocol(self) -> EvalProtocol:
        return self._build(EvalProtocol, "eval", crop=int(self.get("eval.crop")),
                           on_quantized=bool(self.get("eval.on_quantized")),
                           psnr_cap=float(self.get("eval.psnr_cap")))

    @property
    def threads(self) -> int:
        """Worker thread cap; defaults to the number of physical cores"""
        value = self.get("runtime.threads")
        if value is None:
            return psutil.cpu_count(logical=False) or 1
        if int(value) < 1:
            raise ConfigError(f"runtime.threads must be >= 1, got {value}")
        return int(value)

    @property
    def dtype(self) -> str:
        value = self.get("runtime.dtype", "float32")
        if value not in ("float32", "float64"):
            raise ConfigError(f"runtime.dtype must be float32 or float64, got {value}")
        return value

    @property
    def log_level(self) -> str:
        return self.get("logging.level", "INFO")

    @property
    def log_file(self) -> Optional[str]:
        return self.get("logging.file")

    @property
    def max_size(self) -> int:
        return self.get("logging.max_size", 10485760)

    @property
    def backup_count(self) -> int:
        return self.get("logging.backup_count", 5)
