"""Ablation grids on top of a TOML config (default: configs/desk.toml).

    python scripts/ablations.py p-empty
    python scripts/ablations.py alpha-beta --seeds 0
    python scripts/ablations.py partition --out runs/ablation_partition.csv

Each grid point trains every seed and prints one row of seed-mean metrics.
"""

import argparse
import csv
import dataclasses
import itertools
import sys
from pathlib import Path

import numpy as np

from ider.config import load_config
from ider.experiment import build_stream, load_data
from ider.trainer import run_experiment

# grid name -> list of (label, {section: {field: value}})
GRIDS = {
    "p-empty": [(f"P={p}", {"loss": {"p_empty": p}}) for p in (0.2, 0.5, 0.7, 0.9, 1.0)],
    "alpha-beta": [(f"alpha={a} beta={b}", {"loss": {"alpha": a, "beta": b}})
                   for a, b in itertools.product((0.0, 0.3, 0.5, 1.0), (0.0, 0.5, 1.0))],
    "partition": [(f"split after stage {k}", {"model": {"partition_point": k}})
                  for k in range(5)],
    "distance": [(d, {"loss": {"distance": d}}) for d in ("mse", "kl")],
    "naive": [(m, {"train": {"method": m}}) for m in ("er", "naive_id", "er_id")],
    "backbone": [("conditioned", {"train": {"method": "finetune"}}),
                 ("zero label embed", {"train": {"method": "finetune"},
                                       "model": {"zero_label_embed": True}}),
                 ("plain", {"train": {"method": "finetune"}, "model": {"conditioned": False}})],
    "buffer-policy": [(p, {"train": {"buffer_policy": p}})
                      for p in ("reservoir", "class_balanced")],
}


def apply(config, changes):
    model = dataclasses.replace(config.model, **changes.get("model", {}))
    loss = dataclasses.replace(config.train.loss, **changes.get("loss", {}))
    train = dataclasses.replace(config.train, loss=loss, **changes.get("train", {}))
    return dataclasses.replace(config, model=model, train=train)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("grid", choices=sorted(GRIDS))
    parser.add_argument("--config", default=Path(__file__).parent.parent / "configs/desk.toml")
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--out", help="also write the table as CSV")
    args = parser.parse_args(argv)

    base = load_config(args.config)
    seeds = args.seeds or base.seeds
    train, test = load_data(base)
    rows = []
    for label, changes in GRIDS[args.grid]:
        config = apply(base, changes)
        runs = [run_experiment(build_stream(config, train, s), train, test,
                               config.train_for_seed(s), config.model) for s in seeds]
        row = {"setting": label,
               "faa": np.mean([r.faa for r in runs]), "faa_std": np.std([r.faa for r in runs]),
               "ff": np.mean([r.ff for r in runs]), "ece": np.mean([r.ece for r in runs]),
               "max_task_mass": np.mean([max(r.task_mass) for r in runs])}
        rows.append(row)
        print(f"{label:24s} FAA {100 * row['faa']:5.1f} +- {100 * row['faa_std']:4.1f}  "
              f"FF {100 * row['ff']:5.1f}  ECE {100 * row['ece']:5.1f}  "
              f"max mass {row['max_task_mass']:.2f}", flush=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
