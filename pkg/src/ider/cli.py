"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 comparison criteria not met
(or bundles not comparable), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ComparisonError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_COMPARE, EXIT_RUNTIME = 0, 2, 3, 4


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("config", nargs="?", help="TOML config file")
    p.add_argument("--config", dest="config_flag", help="TOML config file")
    p.add_argument("--seed", type=int, action="append",
                   help="run seed; repeat for several (replaces experiment.seeds)")
    p.add_argument("--method", help="finetune | er | er_ice | er_id | bfp_id | naive_id")
    p.add_argument("--buffer", type=int, help="replay buffer capacity")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--p-empty", type=float, dest="p_empty")
    p.add_argument("--out", help="output directory")


def _resolve(args) -> ExperimentConfig:
    path = args.config_flag or args.config
    config = load_config(path) if path else ExperimentConfig()
    return apply_overrides(config, seed=args.seed, method=args.method, buffer=args.buffer,
                           alpha=args.alpha, beta=args.beta, p_empty=args.p_empty, out=args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ider", description="Continual-learning experiments with idempotent experience replay.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train every seed and write results")
    _add_overrides(p)
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")

    p = sub.add_parser("dry-run", help="validate a config and print the resolved plan")
    _add_overrides(p)

    p = sub.add_parser("compare", help="paired comparison of two result bundles")
    p.add_argument("candidate", help="results.json (or its directory) of the new method")
    p.add_argument("baseline", help="results.json (or its directory) of the control")
    p.add_argument("--min-faa-gain", type=float, default=0.0,
                   help="required per-seed FAA gain, as a fraction (0.05 = 5 points)")
    p.add_argument("--min-ece-reduction", type=float, default=0.0,
                   help="required per-seed relative ECE reduction (0.3 = 30%%)")

    p = sub.add_parser("export-stream-manifest", help="write the task stream of one seed as JSON")
    _add_overrides(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # imported lazily so that --help stays fast
    from . import experiment

    try:
        if args.verb == "compare":
            report = experiment.compare(experiment.load_bundle(args.candidate),
                                        experiment.load_bundle(args.baseline),
                                        args.min_faa_gain, args.min_ece_reduction)
            print(json.dumps(report, indent=2))
            return EXIT_OK if report["holds"] else EXIT_COMPARE
        config = _resolve(args)
        if args.verb == "dry-run" or getattr(args, "dry_run", False):
            print(json.dumps(experiment.plan(config), indent=2))
            return EXIT_OK
        if args.verb == "export-stream-manifest":
            train, _ = experiment.load_data(config)
            seed = config.seeds[0]
            text = experiment.build_stream(config, train, seed).to_json()
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text)
            else:
                print(text)
            return EXIT_OK
        bundle = experiment.run(config)
        print(json.dumps({"out_dir": config.out_dir, "aggregate": bundle["aggregate"]}, indent=2))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ComparisonError as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return EXIT_COMPARE
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("ider").exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
