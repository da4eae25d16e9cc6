"""Run configuration: one YAML file plus ``--section.key=value`` overrides.

Every section mirrors a module config.  Unknown sections or keys are
rejected so that a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .corpusgen import GenConfig
from .evaluation import BootstrapCI
from .marketdata import SplitSpec
from .model import ModelConfig
from .training import TrainConfig

RUN_ROOT_ENV = "HIREFORMER_RUN_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    name: str = "default"
    precision: str = "float32"        # float64 makes every subcommand bit-reproducible

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass(frozen=True)
class TokenizerSection:
    vocab_size: int = 1000


@dataclass(frozen=True)
class FinetuneSection:
    init: str = "random"              # random | checkpoint
    checkpoint: Optional[str] = None  # default: <run>/pretrain/final.ckpt
    train: TrainConfig = TrainConfig(task="finetune")


@dataclass(frozen=True)
class EvalSection:
    bootstrap: BootstrapCI = BootstrapCI()
    workers: int = 1


@dataclass(frozen=True)
class AnalyzeSection:
    channel: str = "norm"
    top_k: int = 3
    split: str = "test"
    max_docs: int = 20                # heatmaps written; scores cover the whole split


@dataclass(frozen=True)
class PathsSection:
    corpus: Optional[str] = None      # default: <run>/corpus/corpus.jsonl
    volumes: Optional[str] = None
    manifest: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    corpus: GenConfig = GenConfig()
    tokenizer: TokenizerSection = TokenizerSection()
    model: ModelConfig = ModelConfig()
    split: SplitSpec = SplitSpec()
    pretrain: TrainConfig = TrainConfig(task="pretrain")
    finetune: FinetuneSection = FinetuneSection()
    eval: EvalSection = EvalSection()
    analyze: AnalyzeSection = AnalyzeSection()
    paths: PathsSection = PathsSection()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dt.date):
        return value.isoformat()
    return value


def _scalar(text: str):
    """Flag text to a Python value; YAML 1.1 would keep ``3e-3`` as a string."""
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def _coerce(value, default, where: str, optional: bool = False):
    """Convert YAML/flag values to the type of the field default."""
    if isinstance(value, str) and value.strip().lower() in ("null", "none", "~"):
        value = None
    if value is None:
        if optional or default is None:
            return None
        raise ConfigError(f"{where}: may not be null")
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, dt.date):
        if isinstance(value, dt.date):
            return value
        try:
            return dt.date.fromisoformat(str(value))
        except ValueError:
            raise ConfigError(f"{where}: expected YYYY-MM-DD, got {value!r}") from None
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, str):
            value = _scalar(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(default, float):
            return float(value)
        if not float(value).is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if default is None and isinstance(value, str):
        return _scalar(value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            if dataclasses.is_dataclass(value):
                value = _shallow(value)
            merged = {**_shallow(default), **(value or {})}
            kwargs[name] = _build(type(default), merged, key)
        else:
            kwargs[name] = _coerce(value, default, key, "Optional" in str(known[name].type))
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--{dotted}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (YAML) and apply ``section.key=value`` overrides; flags win."""
    tree: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override {item!r} must name a section")
        _set_path(tree, key, value)
    return _build(RunConfig, tree, "")


def run_dir(config: RunConfig, root=None) -> Path:
    """``$HIREFORMER_RUN_ROOT/<run.name>`` (root defaults to ``./runs``)."""
    base = Path(root or os.environ.get(RUN_ROOT_ENV) or "runs")
    return base / config.run.name
