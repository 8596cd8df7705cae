"""Strict JSON run configuration (model, train, data, paths)."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from micar.errors import ConfigurationError
from micar.model import ModelConfig

SEED_ENV = "MICAR_SEED"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    msve_lr: float = 5e-5
    weight_decay: float = 5e-5
    gamma: float = 0.1
    step_epochs: Optional[int] = None
    seed: int = 0
    max_steps: Optional[int] = None
    val_width: int = 1

    def resolved_step_epochs(self) -> int:
        return self.step_epochs if self.step_epochs else max(1, self.epochs // 3)


@dataclass
class DataConfig:
    path: str = "data/synthetic"
    max_len: int = 60
    train_splits: list = field(default_factory=lambda: ["train"])


@dataclass
class PathsConfig:
    checkpoint_dir: str = "checkpoints"
    artifact_dir: str = "artifacts"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "paths": PathsConfig}


def _type_ok(value: Any, annotation: str) -> bool:
    ann = annotation.replace("Optional[", "").rstrip("]")
    if value is None:
        return annotation.startswith("Optional")
    if ann == "bool":
        return isinstance(value, bool)
    if ann == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if ann == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if ann == "str":
        return isinstance(value, str)
    if ann == "list":
        return isinstance(value, list)
    return True


def parse_run_config(raw: dict) -> RunConfig:
    """Build a :class:`RunConfig`, collecting every unknown key and mistyped field."""
    if not isinstance(raw, dict):
        raise ConfigurationError("run config must be a JSON object")
    errors = [f"unknown section {k!r}" for k in sorted(set(raw) - set(_SECTIONS))]
    built = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            errors.append(f"section {name!r} must be an object")
            continue
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key in sorted(section):
            if key not in fields:
                errors.append(f"{name}.{key}: unknown key")
            elif not _type_ok(section[key], str(fields[key].type)):
                errors.append(f"{name}.{key}: expected {fields[key].type}, got {type(section[key]).__name__}")
        if not errors:
            built[name] = cls(**section)
    if errors:
        raise ConfigurationError("invalid run config:\n  " + "\n  ".join(errors))
    cfg = RunConfig(**built)
    cfg.model.validate()
    return cfg


def load_run_config(path: Optional[Union[str, Path]] = None, env: Optional[dict] = None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None); ``MICAR_SEED`` overrides the seed."""
    raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    cfg = parse_run_config(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.train.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package (``minimal`` or ``desk``)."""
    return Path(str(resources.files("micar") / "configs" / f"{name}.json"))
