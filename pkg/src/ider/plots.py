"""Static PNG figures for a finished run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import reliability_table  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def accuracy_curve(acc_matrix: np.ndarray, path) -> Path:
    """Per-task accuracy after each training stage, plus the running average."""
    a = np.asarray(acc_matrix, float)
    T = a.shape[0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    stages = np.arange(1, T + 1)
    for i in range(T):
        ax.plot(stages[i:], 100 * a[i:, i], marker="o", lw=1, label=f"task {i + 1}")
    ax.plot(stages, 100 * np.nanmean(a, axis=1), "k--", lw=2, label="average")
    ax.set(xlabel="after task", ylabel="accuracy (%)", ylim=(0, 101), xticks=stages)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, Path(path))


def reliability_diagram(log, path, n_bins: int = 10) -> Path:
    rows = reliability_table(log, n_bins)
    lo = np.array([r["lo"] for r in rows])
    width = 1.0 / n_bins
    acc = np.array([r["accuracy"] for r in rows])
    conf = np.array([r["confidence"] for r in rows])
    filled = np.array([r["count"] > 0 for r in rows])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(lo[filled], acc[filled], width=width, align="edge", edgecolor="k", label="accuracy")
    ax.bar(lo[filled], (conf - acc)[filled], bottom=acc[filled], width=width, align="edge",
           color="tab:red", alpha=0.35, label="gap")
    ax.plot([0, 1], [0, 1], "k:", lw=1)
    ax.set(xlabel="confidence", ylabel="accuracy", xlim=(0, 1), ylim=(0, 1))
    ax.legend(loc="upper left", fontsize=8)
    return _save(fig, Path(path))


def idempotence_hist(distances: dict[str, np.ndarray], path) -> Path:
    """Overlaid histograms, one per named distance sample."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    finite = [np.asarray(d) for d in distances.values() if d is not None and len(d)]
    top = max((float(np.percentile(d, 99)) for d in finite), default=1.0) or 1.0
    bins = np.linspace(0, top, 40)
    for name, d in distances.items():
        if d is not None and len(d):
            ax.hist(np.clip(d, 0, top), bins=bins, alpha=0.5, label=name, density=True)
    ax.set(xlabel="idempotence distance", ylabel="density")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def task_mass(masses: dict[str, list[float]], path) -> Path:
    """Grouped bars of mean predicted probability mass per task."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(masses)
    T = len(next(iter(masses.values())))
    width = 0.8 / max(len(names), 1)
    for k, name in enumerate(names):
        ax.bar(np.arange(T) + k * width, masses[name], width=width, label=name)
    ax.axhline(1 / T, color="k", ls=":", lw=1)
    ax.set(xlabel="task", ylabel="probability mass", xticks=np.arange(T) + 0.4 - width / 2,
           xticklabels=[str(i + 1) for i in range(T)])
    ax.legend(fontsize=8)
    return _save(fig, Path(path))
