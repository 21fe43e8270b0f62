"""Class-incremental (CIL) and generalized class-incremental (GCIL) task streams."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError

PROTOCOLS = ("CIL", "GCIL-uniform", "GCIL-longtail")
LONGTAIL_DECAY = 0.9


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]
    train_samples: tuple[int, ...]
    per_class_counts: dict[int, int] = field(hash=False)

    def __post_init__(self):
        if not self.classes:
            raise ConfigError(f"task {self.task_id} has no classes")
        if sum(self.per_class_counts.values()) != len(self.train_samples):
            raise ConfigError(f"task {self.task_id}: per-class counts do not sum to sample count")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSpec, ...]
    protocol: str
    seed: int
    n_classes: int

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "CIL":
            seen: set[int] = set()
            for t in self.tasks:
                if seen & set(t.classes):
                    raise ConfigError("CIL tasks must have disjoint class sets")
                seen |= set(t.classes)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskSpec:
        return self.tasks[i]

    @property
    def overlapping(self) -> bool:
        total = sum(len(t.classes) for t in self.tasks)
        return total != len(set().union(*(t.classes for t in self.tasks)))

    def seen_classes(self, upto: int) -> list[int]:
        """Sorted classes of tasks ``0..upto`` inclusive."""
        return sorted(set().union(*(t.classes for t in self.tasks[: upto + 1])))

    def first_task_of(self) -> dict[int, int]:
        first: dict[int, int] = {}
        for t in self.tasks:
            for c in t.classes:
                first.setdefault(c, t.task_id)
        return first

    def manifest(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "classes": list(t.classes),
                    "per_class_counts": {str(c): n for c, n in sorted(t.per_class_counts.items())},
                }
                for t in self.tasks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)


def make_cil_stream(dataset: LabeledDataset, n_tasks: int, seed: int) -> TaskStream:
    """Split the classes into ``n_tasks`` disjoint groups by a seeded permutation."""
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if dataset.n_classes % n_tasks:
        raise ConfigError(f"{dataset.n_classes} classes not divisible into {n_tasks} tasks")
    per_task = dataset.n_classes // n_tasks
    order = np.random.default_rng(seed).permutation(dataset.n_classes)
    tasks = []
    for t in range(n_tasks):
        classes = tuple(sorted(int(c) for c in order[t * per_task:(t + 1) * per_task]))
        idx = dataset.indices_of(classes)
        counts = {c: int(np.sum(dataset.y[idx] == c)) for c in classes}
        tasks.append(TaskSpec(t, classes, tuple(int(i) for i in idx), counts))
    return TaskStream(tuple(tasks), "CIL", seed, dataset.n_classes)


def _split_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Counts >= 1, proportional to ``weights``, summing to ``total`` (largest remainder)."""
    spare = total - len(weights)
    raw = spare * weights / weights.sum()
    counts = np.floor(raw).astype(np.int64)
    short = spare - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts + 1


def make_gcil_stream(dataset: LabeledDataset, n_tasks: int, mode: str,
                     class_count_range: tuple[int, int], samples_per_task: int,
                     seed: int) -> TaskStream:
    """GCIL stream: variable class counts, class reappearance, optional long-tail imbalance.

    Each task draws its class count uniformly from ``class_count_range``, then that
    many distinct classes. Classes may recur across tasks. In ``longtail`` mode the
    k-th drawn class gets weight ``0.9**k``.
    """
    lo, hi = class_count_range
    if mode not in ("uniform", "longtail"):
        raise ConfigError(f"GCIL mode must be 'uniform' or 'longtail', got {mode!r}")
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if not 1 <= lo <= hi <= dataset.n_classes:
        raise ConfigError(f"class_count_range {class_count_range} outside [1, {dataset.n_classes}]")
    if samples_per_task < hi:
        raise ConfigError("samples_per_task must be >= the largest class count")
    rng = np.random.default_rng(seed)
    pools = {c: dataset.indices_of([c]) for c in range(dataset.n_classes)}
    tasks = []
    for t in range(n_tasks):
        k = int(rng.integers(lo, hi + 1))
        drawn = [int(c) for c in rng.choice(dataset.n_classes, size=k, replace=False)]
        if mode == "uniform":
            weights = np.ones(k)
        else:
            weights = LONGTAIL_DECAY ** np.arange(k)
        counts = _split_counts(samples_per_task, weights)
        idx: list[int] = []
        per_class = {}
        for c, n in zip(drawn, counts):
            pool = pools[c]
            if len(pool) == 0:
                raise ConfigError(f"class {c} has no training samples")
            pick = rng.choice(pool, size=int(n), replace=int(n) > len(pool))
            idx.extend(int(i) for i in pick)
            per_class[c] = int(n)
        tasks.append(TaskSpec(t, tuple(sorted(drawn)), tuple(idx), per_class))
    protocol = "GCIL-uniform" if mode == "uniform" else "GCIL-longtail"
    return TaskStream(tuple(tasks), protocol, seed, dataset.n_classes)
