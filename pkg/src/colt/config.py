"""Experiment configuration: flat ``section.key = value`` files with validated defaults.

Example::

    # 8-class synthetic blobs, conv3s
    experiment.name = blobs8
    data.source = blobs
    data.classes = 8
    model.arch = conv3s
    schedule.target_sparsity = 89
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datasets import Dataset, load_idx, synthetic_blobs
from .models import ModelSpec
from .pruning import ELIGIBILITY_RULES, PruneSchedule
from .tickets import Seeds, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class UnknownKeyError(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class ConfigFileError(ConfigError):
    pass


@dataclass
class ExperimentSection:
    name: str = "experiment"


@dataclass
class ModelSection:
    arch: str = "conv3s"
    widths: tuple[int, ...] = ()
    norm: str = "none"


@dataclass
class DataSection:
    source: str = "blobs"  # "blobs" | "idx"
    classes: int = 8
    per_class: int = 200
    shape: tuple[int, ...] = (1, 16, 16)
    separation: float = 1.15
    sigma: float = 1.0
    pattern_size: int = 4
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ScheduleSection:
    p_lth: float = 0.20
    p_colt: float = 0.15
    target_sparsity: float = 89.0
    max_rounds: int = 30
    eligibility: str = "conv-only"
    basis: str = "eligible"


@dataclass
class TrainSection:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 3e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    warmup: bool = True
    anneal_at: tuple[float, ...] = (0.4, 0.6, 0.9)
    anneal_factor: float = 5.0
    val_fraction: float = 0.1


@dataclass
class SeedsSection:
    init: int = 0
    data: int = 1000
    head: int = 2000


@dataclass
class EvalSection:
    milestones: tuple[float, ...] = ()
    accuracy_target: float = -1.0  # < 0 disables the accuracy stopping rule


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    target: DataSection | None = None
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- derived objects ----------------------------------------------------
    def model_spec(self, d: Dataset | None = None) -> ModelSpec:
        widths = self.model.widths or ((16, 32, 64) if self.model.arch == "conv3s" else (256, 128))
        num_classes = d.num_classes if d is not None else self.data.classes
        shape = d.input_shape if d is not None else tuple(self.data.shape)
        return ModelSpec(arch=self.model.arch, widths=tuple(widths), num_classes=max(num_classes, 2),
                         input_shape=tuple(shape), norm=self.model.norm)

    def schedule_for(self, method: str) -> PruneSchedule:
        p = self.schedule.p_colt if method == "colt" else self.schedule.p_lth
        return PruneSchedule(p=p, eligibility=self.schedule.eligibility,
                             target_sparsity=self.schedule.target_sparsity,
                             max_rounds=self.schedule.max_rounds, basis=self.schedule.basis)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, optimizer=t.optimizer, lr=t.lr,
                           momentum=t.momentum, betas=(t.beta1, t.beta2), weight_decay=t.weight_decay,
                           warmup=t.warmup, anneal_at=tuple(t.anneal_at), anneal_factor=t.anneal_factor,
                           val_fraction=t.val_fraction)

    def seed_set(self) -> Seeds:
        return Seeds(self.seeds.init, self.seeds.data, self.seeds.head)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        s = Seeds.from_base(seed)
        return dataclasses.replace(self, seeds=SeedsSection(s.init, s.data, s.head))

    def load_data(self, section: str = "data") -> tuple[Dataset, Dataset]:
        d = getattr(self, section)
        if d is None:
            raise ConfigError("section is not configured", section)
        name = f"{self.experiment.name}:{section}"
        if d.source == "blobs":
            return synthetic_blobs(d.classes, d.per_class, tuple(d.shape), seed=d.seed, separation=d.separation,
                                   sigma=d.sigma, pattern_size=d.pattern_size, name=name)
        train = load_idx(d.train_images, d.train_labels, "train", name)
        test = load_idx(d.test_images, d.test_labels, "test", name)
        return train, test


SECTION_TYPES = {
    "experiment": ExperimentSection, "model": ModelSection, "data": DataSection, "target": DataSection,
    "schedule": ScheduleSection, "train": TrainSection, "seeds": SeedsSection, "eval": EvalSection,
    "output": OutputSection,
}


def _convert(raw: str, default: Any, key: str):
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
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()] if raw.strip() else []
            typ = float if key.endswith(("anneal_at", "milestones")) else int
            return tuple(typ(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", key) from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise RangeError(message, key)


def validate(cfg: ExperimentConfig, check_paths: bool = True) -> ExperimentConfig:
    s, t, m = cfg.schedule, cfg.train, cfg.model
    _check(0 < s.p_lth < 1, "schedule.p_lth", f"must be in (0, 1), got {s.p_lth}")
    _check(0 < s.p_colt < 1, "schedule.p_colt", f"must be in (0, 1), got {s.p_colt}")
    _check(0 <= s.target_sparsity < 100, "schedule.target_sparsity", f"must be in [0, 100), got {s.target_sparsity}")
    _check(s.max_rounds >= 0, "schedule.max_rounds", f"must be >= 0, got {s.max_rounds}")
    _check(s.eligibility in ELIGIBILITY_RULES, "schedule.eligibility", f"must be one of {ELIGIBILITY_RULES}")
    _check(s.basis in ("all", "eligible"), "schedule.basis", "must be 'all' or 'eligible'")
    _check(t.epochs >= 1, "train.epochs", f"must be >= 1, got {t.epochs}")
    _check(t.batch_size >= 1, "train.batch_size", f"must be >= 1, got {t.batch_size}")
    _check(t.lr > 0, "train.lr", f"must be > 0, got {t.lr}")
    _check(t.optimizer in ("adam", "sgd"), "train.optimizer", f"must be 'adam' or 'sgd', got {t.optimizer!r}")
    _check(0 <= t.momentum < 1, "train.momentum", f"must be in [0, 1), got {t.momentum}")
    _check(0 <= t.beta1 < 1, "train.beta1", f"must be in [0, 1), got {t.beta1}")
    _check(0 <= t.beta2 < 1, "train.beta2", f"must be in [0, 1), got {t.beta2}")
    _check(t.weight_decay >= 0, "train.weight_decay", f"must be >= 0, got {t.weight_decay}")
    _check(all(0 < a < 1 for a in t.anneal_at), "train.anneal_at", "fractions must be in (0, 1)")
    _check(t.anneal_factor > 0, "train.anneal_factor", f"must be > 0, got {t.anneal_factor}")
    _check(0 <= t.val_fraction < 1, "train.val_fraction", f"must be in [0, 1), got {t.val_fraction}")
    _check(m.arch in ("mlp", "conv3s"), "model.arch", f"must be 'mlp' or 'conv3s', got {m.arch!r}")
    _check(all(w > 0 for w in m.widths), "model.widths", "must be positive")
    _check(m.norm in ("none", "batch"), "model.norm", f"must be 'none' or 'batch', got {m.norm!r}")
    for section in ("data", "target"):
        d = getattr(cfg, section)
        if d is None:
            continue
        _check(d.source in ("blobs", "idx"), f"{section}.source", f"must be 'blobs' or 'idx', got {d.source!r}")
        if d.source == "blobs":
            _check(d.classes >= 2, f"{section}.classes", f"must be >= 2, got {d.classes}")
            _check(d.per_class >= 1, f"{section}.per_class", f"must be >= 1, got {d.per_class}")
            _check(len(d.shape) == 3 and all(v > 0 for v in d.shape), f"{section}.shape", "must be CxHxW")
            _check(d.sigma > 0, f"{section}.sigma", f"must be > 0, got {d.sigma}")
        elif check_paths:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(d, key)
                if not path or not Path(path).is_file():
                    raise ConfigFileError(f"file not found: {path!r}", f"{section}.{key}")
    return cfg


def parse_text(text: str, check_paths: bool = True) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTION_TYPES or not name:
            raise UnknownKeyError("unknown key", key)
        if getattr(cfg, section) is None:
            setattr(cfg, section, SECTION_TYPES[section]())
        obj = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise UnknownKeyError("unknown key", key)
        setattr(obj, name, _convert(raw, getattr(obj, name), key))
    return validate(cfg, check_paths)


def parse_config(path, check_paths: bool = True) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigFileError(f"config file not found: {str(p)!r}")
    return parse_text(p.read_text(encoding="utf-8"), check_paths)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTION_TYPES:
        obj = getattr(cfg, section)
        if obj is None:
            continue
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
