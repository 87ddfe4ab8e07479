"""Strict JSON run configuration.

Every section maps onto a dataclass; unknown keys fail with their dotted path
so a typo such as ``train.loss.margn`` is reported verbatim.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dfc import ControllerConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig

CONFIG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    num_sources: int = 3
    num_identities: int = 20
    samples_per_identity: int = 10
    num_cameras: int = 3
    feature_dim: int = 32
    shift_scale: float = 1.0
    camera_jitter: float = 0.3
    noise_sigma: float = 0.5


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str | None = None
    sources: tuple[str, ...] = ()
    target: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    settings: tuple[str, ...] = ("A", "B", "C", "D")
    protocol: str = "target"  # "target" | "loo"
    jobs: int = 1

    def __post_init__(self):
        bad = set(self.settings) - {"A", "B", "C", "D"}
        if bad:
            raise ConfigError(f"ablate.settings: unknown setting(s) {sorted(bad)}")
        if self.protocol not in ("target", "loo"):
            raise ConfigError(f"ablate.protocol must be 'target' or 'loo', got {self.protocol!r}")
        if not self.seeds:
            raise ConfigError("ablate.seeds must not be empty")


@dataclass(frozen=True)
class RunConfig:
    format_version: int = CONFIG_FORMAT_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


_ROOT_SEED_ONLY = {"train.seed"}


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected an object, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        kwargs = {}
        for key, v in value.items():
            sub = f"{path}.{key}" if path else key
            if key not in names or sub in _ROOT_SEED_ONLY:
                hint = " (set the top-level seed instead)" if sub in _ROOT_SEED_ONLY else ""
                raise ConfigError(f"unknown config key {sub!r}{hint}")
            kwargs[key] = _build(hints[key], v, sub)
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path or 'config'}: {exc}") from exc
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "format_version" not in doc:
        raise ConfigError("config is missing format_version")
    if doc["format_version"] != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {doc['format_version']!r}")
    return _build(RunConfig, doc, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)


def config_to_dict(cfg: Any) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    d = conv(cfg)
    if isinstance(cfg, RunConfig):
        d["train"].pop("seed", None)
    return d


__all__ = [
    "AblateConfig",
    "ControllerConfig",
    "DataConfig",
    "LossConfig",
    "PathsConfig",
    "RunConfig",
    "TrainConfig",
    "config_to_dict",
    "load_config",
    "parse_config",
]
