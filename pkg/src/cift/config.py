"""Run configuration: JSON file overridden by command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError
from .losses import DEFAULT_LAMBDAS
from .model import ModelConfig

MODE_ALIASES = {"cift": "cift", "rnnt": "rnnt", "rnnt-baseline": "rnnt"}


@dataclass
class RunConfig:
    seed: int
    mode: str = "cift"
    model: ModelConfig = field(default_factory=ModelConfig)
    lambdas: Tuple[float, float, float] = DEFAULT_LAMBDAS
    lr: float = 1e-3
    warmup_steps: int = 200
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    grad_clip: float = 5.0
    steps: int = 2000
    batch_size: int = 16
    train_data: Optional[str] = None
    dev_data: Optional[str] = None
    checkpoint: Optional[str] = None
    metrics: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.betas = tuple(float(x) for x in self.betas)
        self.validate()

    def validate(self):
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("an integer seed is required")
        if self.mode not in MODE_ALIASES:
            raise ConfigError(f"mode must be one of {sorted(MODE_ALIASES)}, got {self.mode!r}")
        self.mode = MODE_ALIASES[self.mode]
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ConfigError(f"lambdas must be three non-negative numbers, got {self.lambdas}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")
        self.model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("config must set a seed")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> dict:
    try:
        with open(Path(path), encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def merge(base: dict, overrides: dict) -> dict:
    """Apply non-None overrides to ``base``; keys of ModelConfig land in the nested ``model`` dict."""
    out = {}
    model = dict(base.get("model") or {})
    model_keys = set(ModelConfig.__dataclass_fields__)
    # flat model keys in the base are accepted too
    for key, value in list(base.items()) + list(overrides.items()):
        if key == "model":
            continue
        if value is None:
            continue
        if key in model_keys:
            model[key] = value
        else:
            out[key] = value
    out["model"] = model
    return out
