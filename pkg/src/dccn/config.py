"""Model, training and run configuration with strict validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError

VARIANTS = (
    "full",
    "global-only",
    "regional-only",
    "attention-for-global",
    "attention-for-regional",
    "attention-both",
    "conventional-routing",
    "text-only",
)

# which extractor feeds each granularity; None means the branch is absent
VARIANT_BRANCHES = {
    "full": ("route", "route"),
    "global-only": ("route", None),
    "regional-only": (None, "route"),
    "attention-for-global": ("attention", "route"),
    "attention-for-regional": ("route", "attention"),
    "attention-both": ("attention", "attention"),
    "conventional-routing": ("conventional", "conventional"),
    "text-only": (None, None),
}


@dataclass
class ModelConfig:
    src_vocab: int = 10000
    tgt_vocab: int = 10000
    d_model: int = 256
    n_heads: int = 8
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 1024
    dropout: float = 0.5
    d_caps: int = 256
    n_v: int = 1
    n_itr: int = 3
    variant: str = "full"
    max_positions: int = 512

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("src_vocab", "tgt_vocab", "d_model", "n_heads", "n_enc_layers",
                     "n_dec_layers", "d_ff", "d_caps", "n_v", "n_itr", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self


@dataclass
class TrainConfig:
    seed: int = 1
    epochs: int = 10
    max_steps: int = 0
    batch_tokens: int = 3700
    lr_factor: float = 1.0
    warmup: int = 4000
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    valid_every: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True
    calibrate_routing: bool = True

    def validate(self):
        if self.batch_tokens < 1 or self.warmup < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_tokens and warmup must be >= 1; epochs and max_steps >= 0")
        return self


@dataclass
class DataConfig:
    """Either a synthetic task (``synthetic``) or parallel text paths."""

    synthetic: dict | None = None
    dataset_dir: str | None = None
    shuffle_features: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
    kwargs = {}
    for key, value in raw.items():
        default = known[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a boolean")
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{key} must be an integer")
        if isinstance(default, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{where}.{key} must be a number")
        kwargs[key] = value
    return cls(**kwargs)


def run_config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    allowed = {"model", "train", "data", "output_dir"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key}")
    cfg = RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        output_dir=raw.get("output_dir", RunConfig.output_dir),
    )
    cfg.model.validate()
    cfg.train.validate()
    return cfg


def load_run_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return run_config_from_dict(raw)
