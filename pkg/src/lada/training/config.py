"""Training hyperparameters and their flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from lada.errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    m: float = 0.5
    a_ins: float = 1e-1
    a_img: float = 2.5e-2
    c_ins: float = 1e-2
    c_img: float = 2.5e-3

    def __post_init__(self):
        if min(dataclasses.astuple(self)) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    warmup_epochs: float = 0.333
    decay_epoch: float = 8
    decay_factor: float = 0.1
    # 0 derives the epoch length from the pool size
    steps_per_epoch: int = 0
    grad_clip: float = 10.0
    ema_decay: float = 0.9
    ema_period: int = 1
    tau_u: float = 0.8
    tau_l: float = 0.05
    use_background_pseudo: bool = True
    unlabeled_ratio: float = 0.8
    mask_block: int = 32
    mask_ratio: float = 0.5
    lambda_m: float = 0.5
    lambda_a_ins: float = 1e-1
    lambda_a_img: float = 2.5e-2
    lambda_c_ins: float = 1e-2
    lambda_c_img: float = 2.5e-3
    da_rate: float = 2.5e-3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.tau_l < self.tau_u <= 1:
            raise ConfigError(f"need 0 <= tau_l < tau_u <= 1, got {self.tau_l}, {self.tau_u}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if not 0 < self.unlabeled_ratio < 1:
            raise ConfigError(f"unlabeled_ratio must be in (0, 1), got {self.unlabeled_ratio}")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.batch_size < 1 or self.mask_block < 1 or self.ema_period < 1:
            raise ConfigError("batch_size, mask_block and ema_period must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.weights  # validates signs

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_m, self.lambda_a_ins, self.lambda_a_img,
                           self.lambda_c_ins, self.lambda_c_img)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, cls=TrainConfig):
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split(sep, 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cls(**values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
