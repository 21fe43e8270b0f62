"""Experiment configuration: TOML file <-> dataclasses, overrides and a stable hash.

Layout::

    [experiment]  name, seeds, out_dir, plots
    [dataset]     name, path, options (table passed to the loader)
    [stream]      protocol, n_tasks, seed, class_count_range, samples_per_task
    [model]       ModelConfig fields
    [train]       TrainConfig fields (except ``loss`` and ``seed``)
    [loss]        LossConfig fields
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

PLOTS = ("accuracy-curve", "reliability", "idempotence-hist", "task-mass")
PROTOCOLS = ("CIL", "GCIL-uniform", "GCIL-longtail")


@dataclass
class DatasetSection:
    name: str = "mnist5k"
    path: str | None = None
    options: dict = field(default_factory=dict)


@dataclass
class StreamSection:
    protocol: str = "CIL"
    n_tasks: int = 5
    seed: int | None = None  # None: use the run seed
    class_count_range: tuple[int, int] = (2, 5)
    samples_per_task: int = 500

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"stream.protocol must be one of {PROTOCOLS}")
        if self.n_tasks < 1:
            raise ConfigError("stream.n_tasks must be >= 1")
        self.class_count_range = tuple(self.class_count_range)
        if len(self.class_count_range) != 2:
            raise ConfigError("stream.class_count_range must be [low, high]")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/experiment"
    plots: list[str] = field(default_factory=lambda: list(PLOTS))
    dataset: DatasetSection = field(default_factory=DatasetSection)
    stream: StreamSection = field(default_factory=StreamSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        if not self.seeds:
            raise ConfigError("experiment.seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("experiment.seeds contains duplicates")
        bad = [p for p in self.plots if p not in PLOTS]
        if bad:
            raise ConfigError(f"experiment.plots: unknown {bad}; choose from {PLOTS}")

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def train_for_seed(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed, loss=copy.deepcopy(self.train.loss))

    def to_dict(self) -> dict:
        train = asdict(self.train)
        loss = train.pop("loss")
        train.pop("seed")
        return {
            "experiment": {"name": self.name, "seeds": list(self.seeds),
                           "out_dir": self.out_dir, "plots": list(self.plots)},
            "dataset": asdict(self.dataset),
            "stream": {**asdict(self.stream),
                       "class_count_range": list(self.stream.class_count_range)},
            "model": asdict(self.model),
            "train": train,
            "loss": loss,
        }

    def hash(self) -> str:
        """Hash of everything that affects results (output location and plots excluded)."""
        d = self.to_dict()
        d["experiment"] = {"seeds": d["experiment"]["seeds"]}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, section: str, values: dict, exclude=()):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


SECTIONS = ("experiment", "dataset", "stream", "model", "train", "loss")


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; allowed: {list(SECTIONS)}")
    exp = dict(raw.get("experiment", {}))
    loss = _build(LossConfig, "loss", raw.get("loss", {}))
    train = _build(TrainConfig, "train", {**raw.get("train", {}), "loss": loss},
                   exclude=("seed",))
    return _build(ExperimentConfig, "experiment", {
        **exp,
        "dataset": _build(DatasetSection, "dataset", raw.get("dataset", {})),
        "stream": _build(StreamSection, "stream", raw.get("stream", {})),
        "model": _build(ModelConfig, "model", raw.get("model", {})),
        "train": train,
    })


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# CLI flag -> (section, key)
OVERRIDES = {
    "seed": ("experiment", "seeds"),
    "method": ("train", "method"),
    "buffer": ("train", "buffer_capacity"),
    "alpha": ("loss", "alpha"),
    "beta": ("loss", "beta"),
    "p_empty": ("loss", "p_empty"),
    "out": ("experiment", "out_dir"),
}


def apply_overrides(config: ExperimentConfig, **flags) -> ExperimentConfig:
    """Return a new config with non-None flags applied and re-validated."""
    raw = config.to_dict()
    for name, value in flags.items():
        if value is None:
            continue
        if name not in OVERRIDES:
            raise ConfigError(f"unknown override {name!r}")
        section, key = OVERRIDES[name]
        if name == "seed":
            value = [value] if isinstance(value, int) else list(value)
        raw[section][key] = value
    return from_dict(raw)


def dump_toml(config: ExperimentConfig) -> str:
    """Minimal TOML writer for the resolved config (scalars, lists, one level of tables)."""
    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{" + ", ".join(f"{k} = {scalar(x)}" for k, x in v.items()) + "}"
        raise TypeError(type(v))

    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {scalar(v)}" for k, v in values.items() if v is not None]
        lines.append("")
    return "\n".join(lines)
