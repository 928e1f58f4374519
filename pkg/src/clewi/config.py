"""Experiment configuration: INI-style file with one section per concern.

Example::

    [experiment]
    version = 1
    name = er-clewi
    seeds = 0, 1, 2
    out_dir = runs/er-clewi

    [data]
    dataset = split-synth-10
    num_tasks = 5

    [model]
    arch = small-mlp
    width = 1

    [train]
    method = er
    lr = 0.03
    epochs = 5

    [buffer]
    capacity = 200

    [clewi]
    enabled = true
    alpha = 0.3

Every key is addressed as ``section.key``. Unknown sections or keys are
rejected. Learning rate, epoch count and the DER++ coefficients are desk-scale
choices, not values taken from published experiments.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .methods import METHODS, TrainConfig
from .models import ARCHS

SCHEMA_VERSION = 1

# accepted in the schema so configs naming them fail with a clear message
UNSUPPORTED_METHODS = ("oewc", "si", "icarl", "gdumb", "er-ace", "mir", "bic")

# interpolation coefficient used when [clewi] alpha is not given
DEFAULT_ALPHA = {"er": 0.3, "agem": 0.5, "derpp": 0.2, "finetune": 0.3}

DATASETS = ("split-synth-10", "synth", "idx")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class ExperimentSection:
    version: int = SCHEMA_VERSION
    name: str = ""
    seeds: tuple = (0,)
    out_dir: str = "runs/default"


@dataclass
class DataSection:
    dataset: str = "split-synth-10"
    num_tasks: int = 5
    seed: int = 0
    num_classes: int = 10
    dim: int = 32
    n_per_class: int = 600
    separation: float = 4.0
    noise: float = 1.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    mean: tuple = (0.0,)
    std: tuple = (1.0,)


@dataclass
class ModelSection:
    arch: str = "small-mlp"
    width: int = 1


@dataclass
class TrainSection:
    method: str = "er"
    lr: float = 0.03
    epochs: int = 5
    batch_size: int = 32
    replay_batch_size: int = 32
    momentum: float = 0.0
    derpp_mse: float = 0.5
    derpp_ce: float = 0.5
    rehearsal: str = "replay"


@dataclass
class BufferSection:
    capacity: int = 200


@dataclass
class ClewiSection:
    enabled: bool = False
    alpha: Optional[float] = None
    batch_size: int = 32


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    buffer: BufferSection = field(default_factory=BufferSection)
    clewi: ClewiSection = field(default_factory=ClewiSection)

    @property
    def alpha(self) -> float:
        if self.clewi.alpha is not None:
            return self.clewi.alpha
        return DEFAULT_ALPHA.get(self.train.method, 0.3)

    @property
    def run_id(self) -> str:
        if self.experiment.name:
            return self.experiment.name
        tag = self.train.method
        if self.train.rehearsal == "none":
            tag += "-norehearsal"
        if self.clewi.enabled:
            tag = f"clewi-{tag}-a{self.alpha:g}"
        return tag

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size,
                           replay_batch_size=t.replay_batch_size, method=t.method, momentum=t.momentum,
                           derpp_mse=t.derpp_mse, derpp_ce=t.derpp_ce,
                           rehearsal=t.rehearsal == "replay", seed=seed)

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, re-validated."""
        out = dataclasses.replace(self, **{
            s: dataclasses.replace(getattr(self, s)) for s in _SECTIONS})
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            setattr(getattr(out, section), name, value)
        validate(out)
        return out


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_SECTION_TYPES = {
    "experiment": ExperimentSection, "data": DataSection, "model": ModelSection,
    "train": TrainSection, "buffer": BufferSection, "clewi": ClewiSection,
}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def parse_config(text: str, base_dir: Optional[Path] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name: f for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(obj, key, _parse_value(raw, getattr(obj, key), f"{section}.{key}"))
    if base_dir is not None:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            val = getattr(cfg.data, key)
            if val and not Path(val).is_absolute():
                setattr(cfg.data, key, str(Path(base_dir) / val))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    e, d, m, t, b, c = cfg.experiment, cfg.data, cfg.model, cfg.train, cfg.buffer, cfg.clewi
    if e.version != SCHEMA_VERSION:
        raise ConfigError(f"experiment.version {e.version} unsupported (expected {SCHEMA_VERSION})")
    if not e.seeds:
        raise ConfigError("experiment.seeds must list at least one seed")
    if d.dataset not in DATASETS:
        raise ConfigError(f"data.dataset {d.dataset!r} not one of {DATASETS}")
    if d.dataset == "idx" and not all((d.train_images, d.train_labels, d.test_images, d.test_labels)):
        raise ConfigError("data.dataset = idx needs train/test image and label paths")
    if d.num_tasks < 1:
        raise ConfigError("data.num_tasks must be >= 1")
    if d.dataset != "idx" and d.num_classes % d.num_tasks:
        raise ConfigError(f"data.num_classes {d.num_classes} not divisible by data.num_tasks {d.num_tasks}")
    if m.arch not in ARCHS:
        raise ConfigError(f"model.arch {m.arch!r} not one of {ARCHS}")
    if m.width < 1:
        raise ConfigError("model.width must be >= 1")
    if t.method in UNSUPPORTED_METHODS:
        raise ConfigError(f"train.method {t.method!r} is listed in the schema but not implemented")
    if t.method not in METHODS:
        raise ConfigError(f"train.method {t.method!r} not one of {METHODS}")
    if t.lr <= 0:
        raise ConfigError("train.lr must be > 0")
    if t.epochs < 1 or t.batch_size < 1 or t.replay_batch_size < 1:
        raise ConfigError("train.epochs and batch sizes must be >= 1")
    if t.rehearsal not in ("replay", "none"):
        raise ConfigError("train.rehearsal must be 'replay' or 'none'")
    if b.capacity < 1:
        raise ConfigError("buffer.capacity must be >= 1")
    if c.enabled and t.method == "joint":
        raise ConfigError("clewi cannot wrap the joint trainer")
    if c.alpha is not None and not 0.0 <= c.alpha <= 1.0:
        raise ConfigError("clewi.alpha must lie in [0, 1]")
    if c.batch_size < 1:
        raise ConfigError("clewi.batch_size must be >= 1")


def to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTION_TYPES:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
