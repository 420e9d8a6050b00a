"""Experiment configuration files.

One ``section.key = value`` assignment per line; ``#`` starts a comment.
Unknown sections or keys are rejected so that typos fail fast.

    data.per_class = 200
    train.lam = 1.0          # alignment weight
    model.channels = 8, 16, 32
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from columbus.errors import ConfigError
from columbus.trainer import TrainConfig


@dataclass
class DataConfig:
    num_classes: int = 4
    per_class: int = 200
    size: int = 32
    seed: int = 0
    target_domain: int = 3
    path: str = ""  # optional CDG1 file; empty means generate in memory


@dataclass
class ModelConfig:
    blocks: int = 3
    channels: tuple[int, ...] = (8, 16, 32)


@dataclass
class SearchConfig:
    trials: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    sampler_seed: int = 0
    workers: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typing.get_origin(kind) is tuple:
            (inner, _) = typing.get_args(kind)
            return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
        if kind is str:
            return raw.strip().strip('"')
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    updates: dict[str, dict] = {name: {} for name in sections}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        obj = sections[section]
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _coerce(raw, hints[name], key)
    return ExperimentConfig(**{s: dataclasses.replace(obj, **updates[s]) for s, obj in sections.items()})


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{section.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
