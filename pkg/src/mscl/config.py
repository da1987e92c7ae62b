"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, ``none`` (or an empty value) clears
an optional setting, lists are comma separated. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    train_path: str = "train.txt"
    test_path: str = "test.txt"
    num_users: Optional[int] = None
    num_items: Optional[int] = None
    output_dir: str = "runs/latest"
    # encoder
    encoder: str = "lightgcn_single"
    num_layers: int = 3
    layer_weights: Optional[tuple] = None
    single_layer: Optional[int] = None
    # loss
    loss: str = "mscl"
    temperature: float = 0.2
    positive_weight: float = 0.5
    num_positives: int = 5
    filter_true_positives: bool = True
    # optimisation
    embedding_dim: int = 64
    init_scheme: str = "normal"
    init_scale: float = 0.1
    learning_rate: float = 1e-3
    l2_lambda: float = 1e-4
    batch_size: int = 2048
    epochs: int = 100
    eval_every: int = 5
    seed: int = 2022
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: Optional[int] = None
    positive_replacement: bool = False
    k: int = 20
    record_timing: bool = False

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder, self.num_layers, self.layer_weights, self.single_layer)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.temperature, self.positive_weight,
                          self.num_positives, self.filter_true_positives)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def validate(self) -> "RunConfig":
        self.encoder_config()
        self.loss_config()
        self.train_config()
        for name in ("num_users", "num_items"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["layer_weights"] is not None:
            out["layer_weights"] = list(out["layer_weights"])
        return out


_HINTS = typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str):
    hint = _HINTS[key]
    optional = typing.get_origin(hint) is typing.Union
    base = typing.get_args(hint)[0] if optional else hint
    if raw == "" or raw.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key} requires a value")
    try:
        if base is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        if base is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None


def parse_config(text: str, validate: bool = True) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    return cfg.validate() if validate else cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))
