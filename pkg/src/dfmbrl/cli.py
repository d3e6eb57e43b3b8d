"""Command-line entry point: generate, train, evaluate, control.

Each verb takes --config and --out (the workspace directory) plus an
optional --seed override. Exit code 0 on success; on failure a single
machine-parsable line ``error:<category>: <message>`` goes to stderr with a
category-specific exit code.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError, load_config
from .gp import NumericalError, TrainingError
from .kernels import InputShapeError
from .pipeline import run_control, run_evaluate, run_generate, run_train
from .plants import SimulationDiverged

EXIT_CODES = {
    "config": 2,
    "io": 3,
    "incompatible": 4,
    "training": 5,
    "numerics": 6,
    "internal": 1,
}


def _category(err: BaseException) -> str:
    if isinstance(err, ConfigError):
        return "config"
    if isinstance(err, FileNotFoundError):
        return "io"
    if isinstance(err, (InputShapeError,)):
        return "incompatible"
    if isinstance(err, TrainingError):
        return "training"
    if isinstance(err, (NumericalError, SimulationDiverged, FloatingPointError)):
        return "numerics"
    if isinstance(err, (ValueError, OSError)):
        return "incompatible" if "model" in str(err).lower() else "config"
    return "internal"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfmbrl",
        description="Derivative-free GP dynamics learning and trajectory "
        "optimization on simulated ball-and-beam / rotary-pendulum plants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("generate", "simulate excitation data and write train/test CSVs"),
        ("train", "build datasets and train the configured models"),
        ("evaluate", "one-step, data-efficiency and rollout reports"),
        ("control", "optimize a trajectory and execute it on the plant"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", required=True, help="workspace directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if name in ("evaluate", "control"):
            p.add_argument("--no-figures", action="store_true",
                           help="skip figure rendering")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "generate":
            result = run_generate(cfg, args.out, seed=args.seed)
        elif args.command == "train":
            result = run_train(cfg, args.out, seed=args.seed)
        elif args.command == "evaluate":
            result = run_evaluate(cfg, args.out, seed=args.seed,
                                  figures=not args.no_figures)
        else:
            result = run_control(cfg, args.out, seed=args.seed,
                                 figures=not args.no_figures)
    except Exception as err:  # noqa: BLE001 - single reporting point
        category = _category(err)
        print(f"error:{category}: {err}", file=sys.stderr)
        return EXIT_CODES[category]
    print(json.dumps(result, indent=1, default=_json_default))
    return 0


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


if __name__ == "__main__":
    sys.exit(main())
