"""Command line entry point: ``python -m riskcem.harness <verb> ...``.

Exit codes: 0 success, 1 numeric failure, 2 invalid input or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..ensemble import EnsembleModel
from ..errors import InvalidInputError, NumericError, PlannerFailure
from .config import load_config
from .experiment import GROUND_TRUTH_FORMAT, run_eval, run_training, sweep

EXIT_OK, EXIT_NUMERIC, EXIT_INVALID = 0, 1, 2


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config)")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="set a config field, e.g. planner.w_aleatoric=0.5 (repeatable)",
    )


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise InvalidInputError(f"grid entry {item!r} is not of the form key=v1,v2,...")
        key, raw = item.split("=", 1)
        grid[key.strip()] = [yaml.safe_load(v) for v in raw.split(",")]
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskcem", description="Risk-averse CEM planning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="alternate data collection and model fitting")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="model.ckpt (optional for ground-truth models)")

    p = sub.add_parser("sweep", help="run a parameter grid")
    _common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="grid axis (repeatable)")
    p.add_argument("--mode", choices=("train", "eval"), default="train")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("inspect-model", help="print a checkpoint summary as JSON")
    p.add_argument("checkpoint", type=Path)
    return parser


def inspect_model(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    if data.get("format") == GROUND_TRUTH_FORMAT:
        return data
    model = EnsembleModel.from_dict(data)
    cfg = model.config
    return {
        "format": data.get("format"),
        "format_version": data.get("format_version"),
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "ensemble_size": cfg.ensemble_size,
        "num_layers": cfg.num_layers,
        "size": cfg.size,
        "logvar_bounds": [cfg.min_logvar, cfg.max_logvar],
        "parameters_per_member": int(sum(p[0].size for p in model.params)),
        "input_mean": model.normalizer.mean.tolist(),
        "input_std": model.normalizer.std.tolist(),
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "inspect-model":
            print(json.dumps(inspect_model(args.checkpoint), indent=1))
            return EXIT_OK
        cfg = load_config(args.config, args.override, seed=args.seed, output=args.out)
        if args.verb == "train":
            result = run_training(cfg)
            print(json.dumps({k: result.summary[k] for k in ("status", "config_hash", "dataset_size")}))
        elif args.verb == "eval":
            summary = run_eval(cfg, args.checkpoint)
            print(json.dumps(summary["metrics"], indent=1))
        else:
            results = sweep(cfg, _parse_grid(args.grid), mode=args.mode, checkpoint=args.checkpoint)
            print(json.dumps(results, indent=1))
    except (NumericError, PlannerFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
