"""Engine configuration: TOML file < ``EKG_*`` environment < command-line flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import tomli

from .errors import ConfigError, InvalidConfig

ENV_PREFIX = "EKG_"


@dataclass(frozen=True)
class EngineConfig:
    graph_dir: str | None = None
    text_features: str | None = None
    visual_features: str | None = None
    k: int = 3
    max_events: int = 2
    max_scenes: int = 1
    max_depth: int | None = None
    tau: float = 0.07
    theta_indoor: float = 0.5
    min_seg_len: int = 2
    fps: float = 0.5
    d: int = 768
    heads: int = 8
    include_ffn: bool = False
    addr: str = "127.0.0.1:7421"
    workers: int = 8
    bench_reps: int = 200

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfig(f"k must be >= 1, got {self.k}")
        if self.max_events < 0 or self.max_scenes < 0 or self.max_events + self.max_scenes < 1:
            raise InvalidConfig("quota components must be >= 0 with a positive sum")
        if self.heads < 1 or self.d % self.heads:
            raise InvalidConfig(f"d={self.d} is not divisible by heads={self.heads}")
        if self.tau <= 0:
            raise InvalidConfig("tau must be positive")
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1")
        if self.bench_reps < 10:
            raise InvalidConfig("bench_reps must be >= 10")
        split_addr(self.addr)

    @property
    def quota(self) -> tuple[int, int]:
        return (self.max_events, self.max_scenes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def split_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise InvalidConfig(f"address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


_FIELDS = {f.name: f for f in dataclasses.fields(EngineConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = str(_FIELDS[name].type)
    if value is None:
        return None
    if isinstance(value, str):
        text = value.strip()
        if "None" in kind and text.lower() in ("", "none", "null"):
            return None
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        value = text
    try:
        if kind.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r}") from None


def _merge(target: dict, source: Mapping[str, Any], origin: str) -> None:
    for key, value in source.items():
        name = key.replace("-", "_").lower()
        if name not in _FIELDS:
            raise ConfigError(f"{origin}: unknown setting {key!r}")
        target[name] = _coerce(name, value)


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    flat: dict[str, Any] = {}
    for key, value in data.items():
        # sections are only for grouping; their keys share one namespace
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    """Resolve the configuration; later sources win. ``None`` overrides are
    ignored so unset command-line flags do not mask other sources."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if path is not None:
        _merge(values, read_toml(path), str(path))
    env_values = {k[len(ENV_PREFIX):]: v for k, v in env.items()
                  if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in _FIELDS}
    _merge(values, env_values, "environment")
    if overrides:
        _merge(values, {k: v for k, v in overrides.items() if v is not None}, "flags")
    return EngineConfig(**values)
