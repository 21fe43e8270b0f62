"""Config-driven runs, result bundles on disk and paired bundle comparison."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_toml
from .data import load_dataset
from .errors import ComparisonError, ConfigError
from .metrics import reliability_table
from .streams import TaskStream, make_cil_stream, make_gcil_stream
from .trainer import RunResult, run_experiment

log = logging.getLogger(__name__)


def load_data(config: ExperimentConfig):
    try:
        return load_dataset(config.dataset.name, config.dataset.path, **config.dataset.options)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset {config.dataset.name!r}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"[dataset] options: {exc}") from None


def build_stream(config: ExperimentConfig, train, seed: int) -> TaskStream:
    s = config.stream
    stream_seed = seed if s.seed is None else s.seed
    if s.protocol == "CIL":
        return make_cil_stream(train, s.n_tasks, stream_seed)
    mode = s.protocol.split("-", 1)[1]
    return make_gcil_stream(train, s.n_tasks, mode, s.class_count_range, s.samples_per_task,
                            stream_seed)


def git_stamp() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def plan(config: ExperimentConfig) -> dict:
    """What ``run`` would do, without training."""
    train, test = load_data(config)
    streams = {seed: build_stream(config, train, seed).manifest() for seed in config.seeds}
    return {
        "name": config.name,
        "config_hash": config.hash(),
        "dataset": {"name": config.dataset.name, "train": len(train), "test": len(test),
                    "input_shape": list(train.input_shape), "n_classes": train.n_classes},
        "method": config.train.method,
        "seeds": list(config.seeds),
        "out_dir": config.out_dir,
        "streams": {str(k): [t["classes"] for t in v["tasks"]] for k, v in streams.items()},
    }


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def aggregate(per_seed: list[dict]) -> dict:
    return {k: _mean_std([r[k] for r in per_seed]) for k in ("faa", "ff", "ece")}


def write_seed_artifacts(out: Path, result: RunResult, plots: list[str]):
    seed = result.seed
    with open(out / f"acc_matrix_seed{seed}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        T = result.acc.T
        w.writerow(["after_task"] + [f"task_{i}" for i in range(T)])
        for t, row in enumerate(result.acc.to_list()):
            w.writerow([t] + ["" if v is None else f"{v:.6f}" for v in row])
    rows = reliability_table(result.confidence, result.n_bins)
    with open(out / f"reliability_seed{seed}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lo", "hi", "count", "confidence", "accuracy"])
        w.writeheader()
        w.writerows(rows)
    if not plots:
        return
    from . import plots as P

    if "accuracy-curve" in plots:
        P.accuracy_curve(result.acc.a, out / f"accuracy_curve_seed{seed}.png")
    if "reliability" in plots:
        P.reliability_diagram(result.confidence, out / f"reliability_seed{seed}.png",
                              result.n_bins)
    if "idempotence-hist" in plots and result.distances_self is not None:
        P.idempotence_hist({"self": result.distances_self, "vs checkpoint": result.distances_cross},
                           out / f"idempotence_hist_seed{seed}.png")
    if "task-mass" in plots and result.task_mass is not None:
        P.task_mass({"final model": result.task_mass}, out / f"task_mass_seed{seed}.png")


def run(config: ExperimentConfig) -> dict:
    """Run every seed, write artifacts and ``results.json``; return the bundle.

    Each seed trains in ``<out_dir>/seed_<k>/`` and resumes from its saved
    progress if present.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(config))
    train, test = load_data(config)
    per_seed = []
    manifests = {}
    for seed in config.seeds:
        stream = build_stream(config, train, seed)
        manifests[str(seed)] = stream.manifest()
        result = run_experiment(stream, train, test, config.train_for_seed(seed), config.model,
                                run_dir=out / f"seed_{seed}")
        write_seed_artifacts(out, result, config.plots)
        per_seed.append(result.summary())
        log.info("seed %d: FAA %.4f FF %s ECE %.4f", seed, result.faa, result.ff, result.ece)
    bundle = {
        "name": config.name,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "version": __version__,
        "git": git_stamp(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "streams": manifests,
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
    }
    (out / "results.json").write_text(json.dumps(bundle, indent=2))
    return bundle


def load_bundle(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ComparisonError(f"cannot read result bundle {path}: {exc}") from None


def compare(candidate: dict, baseline: dict, min_faa_gain: float = 0.0,
            min_ece_reduction: float = 0.0) -> dict:
    """Per-seed deltas ``candidate - baseline`` and whether the directional checks hold.

    Checks: FAA gain >= ``min_faa_gain`` and > 0 on every seed; relative ECE
    reduction >= ``min_ece_reduction`` and > 0 on every seed; FF lower on the
    seed mean.
    """
    cs = {r["seed"]: r for r in candidate["per_seed"]}
    bs = {r["seed"]: r for r in baseline["per_seed"]}
    if sorted(cs) != sorted(bs):
        raise ComparisonError(f"seed lists differ: {sorted(cs)} vs {sorted(bs)}")
    for section in ("dataset", "stream"):
        if candidate["config"][section] != baseline["config"][section]:
            raise ComparisonError(f"bundles use different [{section}] settings")
    rows = []
    for seed in sorted(cs):
        c, b = cs[seed], bs[seed]
        ece_rel = (b["ece"] - c["ece"]) / b["ece"] if b["ece"] else 0.0
        ff_delta = None if c["ff"] is None or b["ff"] is None else c["ff"] - b["ff"]
        rows.append({
            "seed": seed,
            "faa_delta": c["faa"] - b["faa"],
            "ff_delta": ff_delta,
            "ece_delta": c["ece"] - b["ece"],
            "ece_relative_reduction": ece_rel,
            "faa_up": c["faa"] > b["faa"],
            "ff_down": ff_delta is not None and ff_delta < 0,
            "ece_down": c["ece"] < b["ece"],
        })
    ff_deltas = [r["ff_delta"] for r in rows if r["ff_delta"] is not None]
    checks = {
        "faa_every_seed": all(r["faa_delta"] > 0 and r["faa_delta"] >= min_faa_gain for r in rows),
        "ece_every_seed": all(r["ece_relative_reduction"] > 0
                              and r["ece_relative_reduction"] >= min_ece_reduction for r in rows),
        "ff_seed_mean": bool(ff_deltas) and float(np.mean(ff_deltas)) < 0,
    }
    return {"candidate": candidate.get("name"), "baseline": baseline.get("name"),
            "per_seed": rows, "checks": checks, "holds": all(checks.values())}
