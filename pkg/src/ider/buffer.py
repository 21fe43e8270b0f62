"""Fixed-capacity replay memory with reservoir and class-balanced reservoir updates."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import ConfigError

POLICIES = ("reservoir", "class_balanced")


class ReplayBuffer:
    """Stores raw ``(x, y)`` exemplars.

    Both policies accept the n-th offered item with probability
    ``capacity / n`` once full. ``reservoir`` overwrites a uniformly random slot;
    ``class_balanced`` overwrites a random entry of a most-represented class
    (ties between classes broken uniformly at random).
    """

    def __init__(self, capacity: int, policy: str = "reservoir", seed: int = 0):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        if policy not in POLICIES:
            raise ConfigError(f"unknown buffer policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.x: np.ndarray | None = None
        self.y = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.stream_count = 0
        self.per_class_counts: Counter[int] = Counter()

    def __len__(self):
        return self.size

    def is_empty(self) -> bool:
        return self.size == 0

    def _store(self, slot: int, x, y: int):
        if self.x is None:
            self.x = np.zeros((self.capacity,) + np.shape(x), dtype=np.asarray(x).dtype)
        if slot < self.size:
            old = int(self.y[slot])
            self.per_class_counts[old] -= 1
            if self.per_class_counts[old] == 0:
                del self.per_class_counts[old]
        else:
            self.size += 1
        self.x[slot] = x
        self.y[slot] = y
        self.per_class_counts[int(y)] += 1

    def _balanced_slot(self) -> int:
        top = max(self.per_class_counts.values())
        tied = sorted(c for c, n in self.per_class_counts.items() if n == top)
        cls = tied[int(self.rng.integers(len(tied)))] if len(tied) > 1 else tied[0]
        slots = np.flatnonzero(self.y[: self.size] == cls)
        return int(slots[self.rng.integers(len(slots))])

    def offer_many(self, xs, ys):
        """Offer a sequence of samples in order; acceptance draws are vectorised."""
        ys = np.asarray(ys, dtype=np.int64)
        n = len(ys)
        if n == 0:
            return self
        positions = self.stream_count + 1 + np.arange(n)  # 1-based stream index
        self.stream_count += n
        fill = max(0, min(n, self.capacity - self.size))
        for i in range(fill):
            self._store(self.size, xs[i], int(ys[i]))
        if fill == n:
            return self
        draws = self.rng.integers(0, positions[fill:])
        for i in np.flatnonzero(draws < self.capacity) + fill:
            if self.policy == "reservoir":
                slot = int(draws[i - fill])
            else:
                slot = self._balanced_slot()
            self._store(slot, xs[i], int(ys[i]))
        return self

    def offer(self, x, y: int):
        return self.offer_many(np.asarray(x)[None], [y])

    def sample_batch(self, k: int, rng: np.random.Generator):
        """``k`` entries drawn uniformly with replacement. Empty buffer or ``k == 0``
        gives empty arrays; the buffer itself is never modified."""
        if k == 0 or self.size == 0:
            shape = (0,) + (self.x.shape[1:] if self.x is not None else ())
            dtype = self.x.dtype if self.x is not None else np.float32
            return np.zeros(shape, dtype=dtype), np.zeros(0, dtype=np.int64)
        idx = rng.integers(0, self.size, size=k)
        return self.x[idx].copy(), self.y[idx].copy()

    def entries(self):
        return self.x[: self.size], self.y[: self.size]

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "policy": self.policy,
            "x": None if self.x is None else self.x[: self.size].copy(),
            "y": self.y[: self.size].copy(),
            "stream_count": self.stream_count,
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "ReplayBuffer":
        buf = cls(state["capacity"], state["policy"])
        buf.rng.bit_generator.state = state["rng"]
        if state["x"] is not None:
            for i, (x, y) in enumerate(zip(state["x"], state["y"])):
                buf._store(i, x, int(y))
        buf.stream_count = state["stream_count"]
        return buf
