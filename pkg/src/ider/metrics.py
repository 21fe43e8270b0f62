"""Final average accuracy, final forgetting, calibration error and idempotence diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import UndefinedMetricError
from .model import one_hot


class AccuracyMatrix:
    """Test accuracy on task ``i`` after training through task ``t`` (``i <= t``).

    Stored as ``a[t, i]``: one row per completed task, so the populated part is
    lower-triangular.
    """

    def __init__(self, n_tasks: int):
        self.T = n_tasks
        self.a = np.full((n_tasks, n_tasks), np.nan)

    def record(self, task: int, after: int, accuracy: float):
        if task > after:
            raise IndexError("accuracy is only defined for task <= after")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        self.a[after, task] = accuracy

    def acc(self, task: int, after: int) -> float:
        return float(self.a[after, task])

    def completed(self) -> int:
        """Number of leading rows that are fully populated."""
        n = 0
        for t in range(self.T):
            if np.isnan(self.a[t, : t + 1]).any():
                break
            n += 1
        return n

    def to_list(self):
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.a]

    @classmethod
    def from_list(cls, rows):
        m = cls(len(rows))
        m.a[:] = np.array([[np.nan if v is None else v for v in row] for row in rows], float)
        return m

    @classmethod
    def from_columns(cls, per_task):
        """Build from ``per_task[i][t]`` sequences (accuracies of task i after task t)."""
        m = cls(len(per_task))
        for i, accs in enumerate(per_task):
            for t, v in enumerate(accs):
                if t >= i and v is not None:
                    m.record(i, t, v)
        return m


def _as_rows(matrix) -> np.ndarray:
    a = matrix.a if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, float)
    if np.isnan(a[-1]).any():
        raise UndefinedMetricError("accuracy matrix is incomplete")
    return a


def faa(matrix) -> float:
    """Mean accuracy over all tasks after the last task."""
    return float(np.mean(_as_rows(matrix)[-1]))


def final_forgetting(matrix) -> float:
    """``1/(T-1) * sum_{i<T} max_{j<T} (a_i^j - a_i^T)`` over defined entries.

    Not clipped at zero: a task that improves after it was learned contributes
    a negative term.
    """
    a = _as_rows(matrix)
    T = a.shape[0]
    if T < 2:
        raise UndefinedMetricError("final forgetting needs at least two tasks")
    drops = [np.nanmax(a[i:T - 1, i]) - a[T - 1, i] for i in range(T - 1)]
    return float(np.mean(drops))


@dataclass
class ConfidenceLog:
    confidence: np.ndarray
    predicted: np.ndarray
    target: np.ndarray
    task: np.ndarray | None = None

    def __len__(self):
        return len(self.confidence)

    @classmethod
    def from_logits(cls, logits, target, task=None) -> "ConfidenceLog":
        probs = torch.softmax(torch.as_tensor(logits, dtype=torch.float64), -1)
        conf, pred = probs.max(-1)
        return cls(conf.numpy(), pred.numpy(), np.asarray(target),
                   None if task is None else np.asarray(task))


def bin_edges(n_bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def reliability_table(log: ConfidenceLog, n_bins: int = 10) -> list[dict]:
    """Per bin ``(lo, hi]``: count, mean confidence, accuracy."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if len(log) == 0:
        raise UndefinedMetricError("empty confidence log")
    edges = bin_edges(n_bins)
    conf = np.asarray(log.confidence, float)
    correct = (np.asarray(log.predicted) == np.asarray(log.target)).astype(float)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    rows = []
    for m in range(n_bins):
        n = int(counts[m])
        rows.append({
            "lo": float(edges[m]), "hi": float(edges[m + 1]), "count": n,
            "confidence": conf_sum[m] / n if n else 0.0,
            "accuracy": acc_sum[m] / n if n else 0.0,
        })
    return rows


def ece(log: ConfidenceLog, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins ``(m/M, (m+1)/M]``."""
    rows = reliability_table(log, n_bins)
    n = len(log)
    return float(sum(r["count"] / n * abs(r["accuracy"] - r["confidence"]) for r in rows))


@torch.no_grad()
def idempotence_distances(net, x: torch.Tensor, z: torch.Tensor | None = None,
                          second=None) -> np.ndarray:
    """Per-sample ``||g(x, softmax(f(x, z))) - f(x, z)||_2``.

    ``g`` is ``net`` itself (self mode) or ``second``, e.g. a frozen checkpoint
    (cross mode). ``z`` defaults to the empty signal.
    """
    second = net if second is None else second
    was_training = getattr(net, "training", False)
    net.eval()
    try:
        y0 = net(x, z)
        y1 = second(x, torch.softmax(y0, -1))
    finally:
        net.train(was_training)
    return (y1 - y0).norm(dim=-1).double().numpy()


def idempotence_histogram(net, x: torch.Tensor, checkpoint=None) -> np.ndarray:
    return idempotence_distances(net, x, None, checkpoint)


def wrong_one_hot(y: torch.Tensor, candidates, n_classes: int,
                  rng: np.random.Generator) -> torch.Tensor:
    """One-hot of a class drawn uniformly from ``candidates`` minus the true class."""
    candidates = np.asarray(sorted(candidates))
    wrong = []
    for label in y.tolist():
        pool = candidates[candidates != label]
        wrong.append(int(pool[rng.integers(len(pool))]))
    return one_hot(torch.tensor(wrong), n_classes)


def task_mass_from_probs(probs: np.ndarray, stream) -> np.ndarray:
    if stream.overlapping:
        raise UndefinedMetricError("task probability mass is undefined for overlapping tasks")
    probs = np.asarray(probs, float)
    return np.array([probs[:, list(t.classes)].sum(axis=1).mean() for t in stream.tasks])


@torch.no_grad()
def task_probability_mass(net, x: torch.Tensor, stream) -> np.ndarray:
    """Mean softmax mass that predictions put on each task's classes."""
    was_training = net.training
    net.eval()
    try:
        probs = torch.softmax(net(x, None), -1).double().numpy()
    finally:
        net.train(was_training)
    return task_mass_from_probs(probs, stream)
