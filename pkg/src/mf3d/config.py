"""Run configuration: a strict JSON document covering the whole pipeline.

Unknown keys are rejected with the exact path of the offender, so a typo in
a config file fails before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .training import AugmentFlags, TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class PathsConfig:
    cache_dir: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc
        try:
            self.encoder.validate()
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from exc
        try:
            self.decoder.validate()
        except ValueError as exc:
            raise ConfigError(f"decoder: {exc}") from exc
        if self.decoder.d_model != self.encoder.d_model:
            raise ConfigError("decoder.d_model: must equal encoder.d_model")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"paths": PathsConfig, "train": TrainConfig,
             "encoder": EncoderConfig, "decoder": DecoderConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        if key == "augment":
            kwargs[key] = _build(AugmentFlags, value, f"{where}.augment")
            continue
        f = known[key]
        kwargs[key] = _coerce(value, f, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(value, f, where: str):
    t = f.type
    base = {"int": int, "float": float, "str": str, "bool": bool}
    if isinstance(t, str):
        if t in ("int", "int | None"):
            if value is None and "None" in t:
                return None
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer")
            return value
        if t == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            return float(value)
        if t == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected true/false")
            return value
        if t == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string")
            return value
    return value


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"config.{key}: unknown section")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, data.get(name, {}), name)
    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)
