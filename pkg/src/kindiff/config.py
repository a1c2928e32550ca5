"""TOML run configuration: strict parsing, defaults, and content hashing.

One document drives every subcommand; sections map onto the dataclasses of
the corresponding modules.  Unknown keys are rejected so typos cannot
silently fall back to defaults, and the hash of the fully-resolved
configuration is embedded in every artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ToySpec
from .euclidean import VpSchedule
from .kinetic import KineticSchedule
from .network import NetConfig
from .sampling import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass(frozen=True)
class DataPaths:
    train: str = "train.jsonl"
    test: str = "test.jsonl"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 0    # 0: use all available cores
    schedule: KineticSchedule = field(default_factory=KineticSchedule)
    vp: VpSchedule = field(default_factory=VpSchedule)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    toy: ToySpec | None = None
    data: DataPaths = field(default_factory=DataPaths)


_SECTIONS = {
    "schedule": KineticSchedule,
    "vp": VpSchedule,
    "net": NetConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "toy": ToySpec,
    "data": DataPaths,
}
_SCALARS = ("seed", "threads")


def _build_section(cls, table: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc

    unknown = set(doc) - set(_SECTIONS) - set(_SCALARS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    kwargs = {}
    for key in _SCALARS:
        if key in doc:
            if not isinstance(doc[key], int):
                raise ConfigError(f"{key} must be an integer")
            kwargs[key] = doc[key]
    for name, cls in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build_section(cls, doc[name], name)
    return RunConfig(**kwargs)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form of the fully-resolved config."""
    blob = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
