"""Experiment configuration: one document drives the whole pipeline.

Configs are plain dataclasses, loadable from YAML, serializable back, and
hashable (sha256 of the canonical JSON form) to name run directories.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .pretext import TASK_IDS
from .transfer import TransferConfig


class ConfigError(ValueError):
    """Raised for invalid or unparseable experiment configs."""


@dataclass(frozen=True)
class TteConfig:
    enabled: bool = True
    fusion: str = "tte"  # tte | mean | none
    mode: str = "absolute"  # absolute | signed deltas
    m_max: float = 0.5
    window: int = 5
    layers: tuple[str, ...] | None = None  # None: auto-select pre-pool convs

    def __post_init__(self):
        if self.fusion not in ("tte", "mean", "none"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.mode not in ("absolute", "signed"):
            raise ConfigError(f"unknown delta mode {self.mode!r}")
        if not (0.0 < self.m_max < 1.0):
            raise ConfigError("m_max must lie in (0, 1)")
        if self.window < 1:
            raise ConfigError("window must be >= 1")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "kld"
    scale: float = 1.0  # 0 disables the penalty entirely
    prior: str = "uniform"
    temperature: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("scale must be >= 0")
        if self.prior != "uniform":
            raise ConfigError(f"unsupported prior {self.prior!r}")
        if self.temperature <= 0 or self.epsilon <= 0:
            raise ConfigError("temperature and epsilon must be positive")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | directory
    path: str | None = None
    n_images: int = 5000
    image_size: int = 32
    classes: int = 10

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "directory" and not self.path:
            raise ConfigError("directory data needs a path")
        if self.n_images < 1 or self.image_size < 4:
            raise ConfigError("n_images and image_size must be sensible")


@dataclass(frozen=True)
class JigsawConfig:
    grid: tuple[int, int] = (2, 2)
    count: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("permutation count must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    probe_train: int = 1000
    probe_test: int = 1000
    dec_clusters: int = 10
    dec_iters: int = 100
    recall_k: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[str, ...] = ("r", "s", "c", "j")
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    region_classes: int = 8
    entropy_weight: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    tte: TteConfig = field(default_factory=TteConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    jigsaw: JigsawConfig = field(default_factory=JigsawConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_root: str = "runs"

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("tasks must be non-empty")
        bad = [t for t in self.tasks if t not in TASK_IDS]
        if bad:
            raise ConfigError(f"unknown tasks {bad}; valid: {TASK_IDS}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be unique")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


_SECTIONS = {
    "tte": TteConfig,
    "regularizer": RegularizerConfig,
    "data": DataConfig,
    "jigsaw": JigsawConfig,
    "transfer": TransferConfig,
    "eval": EvalConfig,
}

_TUPLE_FIELDS = ("tasks", "encoder_widths", "grid", "layers", "adapter_dims")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(value)
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def lists(node):
        if isinstance(node, dict):
            return {k: lists(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return [lists(v) for v in node]
        return node

    return lists(d)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config document must be a mapping, got {type(raw).__name__}")
    kwargs = {}
    valid = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        for key, value in raw.items():
            if key in _SECTIONS:
                sub = {k: _tuplify(v) for k, v in (value or {}).items()}
                kwargs[key] = _SECTIONS[key](**sub)
            elif key in _TUPLE_FIELDS:
                kwargs[key] = _tuplify(value)
            else:
                kwargs[key] = value
    except TypeError as exc:
        raise ConfigError(f"bad config structure: {exc}") from exc
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: ExperimentConfig) -> str:
    """Short stable digest of everything except the output location."""
    d = config_to_dict(cfg)
    d.pop("out_root", None)
    blob = json.dumps(d, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_dir_name(cfg: ExperimentConfig) -> str:
    return f"{config_hash(cfg)}-s{cfg.seed}"
