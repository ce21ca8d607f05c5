"""Run configuration: one flat JSON file with dotted keys covering the model,
loss, training, and synthetic-data sections. Unknown keys are rejected and a
canonical hash over the sorted effective values identifies the run."""

from __future__ import annotations

import dataclasses
import hashlib
import json

from .data import SyntheticSpec
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = (
    ("model", ModelConfig),
    ("loss", LossConfig),
    ("train", TrainConfig),
    ("data", SyntheticSpec),
)


def _defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for prefix, cls in _SECTIONS:
        for f in dataclasses.fields(cls):
            if f.default is dataclasses.MISSING:
                raise AssertionError(f"{cls.__name__}.{f.name} needs a default")
            out[f"{prefix}.{f.name}"] = f.default
    return out


DEFAULTS = _defaults()


def _coerce(key: str, value, expected) -> object:
    if isinstance(expected, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(expected, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(expected, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(expected, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported config type")


class RunConfig:
    """The fully-resolved flat configuration of one run."""

    def __init__(self, values: dict[str, object] | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, DEFAULTS[key])
        self.values = merged
        # constructing every section validates ranges up front
        self.model_config()
        self.loss_config()
        self.train_config()
        self.synthetic_spec()

    def __getitem__(self, key: str):
        return self.values[key]

    def as_dict(self) -> dict[str, object]:
        return dict(self.values)

    @property
    def hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def _section(self, prefix: str, cls):
        kwargs = {
            f.name: self.values[f"{prefix}.{f.name}"]
            for f in dataclasses.fields(cls)
        }
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid {prefix} config: {e}") from None

    def model_config(self) -> ModelConfig:
        return self._section("model", ModelConfig)

    def loss_config(self) -> LossConfig:
        return self._section("loss", LossConfig)

    def train_config(self) -> TrainConfig:
        return self._section("train", TrainConfig)

    def synthetic_spec(self) -> SyntheticSpec:
        return self._section("data", SyntheticSpec)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        values = self.as_dict()
        values.update(overrides)
        return RunConfig(values)


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        values.update(raw)
    if overrides:
        values.update(overrides)
    return RunConfig(values)


def parse_override(text: str) -> tuple[str, object]:
    """Parse a `key=value` command-line override; values are JSON when valid,
    bare strings otherwise."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def from_flat_dict(values: dict[str, object]) -> RunConfig:
    return RunConfig(values)
