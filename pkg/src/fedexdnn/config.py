"""Experiment configuration: nested dataclasses loaded from a JSON document."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .client import TrainConfig
from .exdnn import LossConfig
from .fedserver import AGGREGATORS, FedCCConfig

PARTITIONS = ("by_mode", "sequential")
EVAL_MODES = ("val_threshold", "auc_only")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class EncoderSection:
    num_layers: int = 4
    hidden_dim: int = 8
    embed_dim: int = 8
    bidirectional: bool = False


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # "synthetic" or "csv"
    # synthetic
    modes: int = 4
    channels: int = 3
    seg_len: int = 16
    n_per_mode: int = 400
    n_per_mode_eval: int = 100
    eval_anomaly_fraction: float = 0.2
    contamination: float = 0.0
    noise_sigma: float = 0.05
    phase_jitter: float = 0.0
    # csv
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    label_column: str | None = "label"
    stride: int = 1
    normalize: bool = True


@dataclass(frozen=True)
class EvalSection:
    mode: str = "val_threshold"


@dataclass(frozen=True)
class ExperimentConfig:
    clients: int = 2
    rounds: int = 5
    aggregator: str = "fedcc"
    num_exemplars: int = 8
    partition: str = "by_mode"
    modes_per_client: int = 2
    seed: int = 0
    parallel_clients: int = 1
    encoder: EncoderSection = field(default_factory=EncoderSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fedcc: FedCCConfig = field(default_factory=FedCCConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError("clients must be >= 1", "clients")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0", "rounds")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(
                f"unknown aggregator {self.aggregator!r}; valid values: {', '.join(AGGREGATORS)}",
                "aggregator")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition must be one of {PARTITIONS}", "partition")
        if self.num_exemplars < 1:
            raise ConfigError("num_exemplars must be >= 1", "num_exemplars")
        if self.eval.mode not in EVAL_MODES:
            raise ConfigError(f"eval.mode must be one of {EVAL_MODES}", "eval.mode")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'", "data.source")
        if self.data.source == "csv":
            for key in ("train_path", "test_path"):
                if not getattr(self.data, key):
                    raise ConfigError(f"data.{key} is required for csv data", f"data.{key}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return config_hash(self)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object", path or None)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {_join(path, key)!r}", _join(path, key))
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if _constructible(cls) else None
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value, _join(path, name))
        elif name == "alpha" and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}", path or None) from exc


def _constructible(cls) -> bool:
    try:
        cls()
        return True
    except Exception:
        return False


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "config")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})", "config") from exc
    return config_from_dict(data)


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Replace top-level or dotted nested fields, e.g. ``override(cfg, **{"loss.balance_weight": 0})``."""
    nested: dict[str, dict] = {}
    top = {}
    for key, value in changes.items():
        if "." in key:
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = value
        else:
            top[key] = value
    for section, vals in nested.items():
        try:
            top[section] = replace(getattr(cfg, section), **vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}", section) from exc
    return replace(cfg, **top)
