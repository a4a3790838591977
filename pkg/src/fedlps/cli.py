"""Command-line interface: run experiments, sweep grids, inspect checkpoints.

Exit codes: 0 success, 2 usage/configuration problem, 3 data problem,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .config import ExperimentConfig, default_tasks, load_config
from .errors import (
    ConfigurationError,
    DataFormatError,
    FedLPSError,
    InputError,
    PartitionError,
    StructuralError,
    UsageError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _classify(exc: Exception) -> int:
    if isinstance(exc, (ConfigurationError, UsageError, StructuralError)):
        return EXIT_USAGE
    if isinstance(exc, (DataFormatError, PartitionError, InputError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def _parse_alpha(token: str) -> float | None:
    if token.lower() == "iid":
        return None
    try:
        return float(token)
    except ValueError:
        raise ConfigurationError(
            f"partition must be a positive number or 'iid', got {token!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlps",
        description="Desk-scale simulator for federated learning with a frozen "
                    "shared encoder and channel-pruned per-task predictors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment and write its artifacts")
    run.add_argument("--config", help="JSON configuration file (flags override it)")
    run.add_argument("--framework", choices=("fedlps", "fedavg", "feddrop", "overlap"))
    run.add_argument("--rounds", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--tasks", type=int, metavar="N",
                     help="use N default synthetic tasks")
    partition = run.add_mutually_exclusive_group()
    partition.add_argument("--alpha", type=float,
                           help="Dirichlet concentration for the non-IID partition")
    partition.add_argument("--iid", action="store_true", help="uniform IID partition")
    run.add_argument("--split-fraction", type=float, dest="split_fraction")
    run.add_argument("--lr", type=float)
    run.add_argument("--weight-decay", type=float, dest="weight_decay")
    run.add_argument("--epochs", type=int)
    run.add_argument("--batch-size", type=int, dest="batch_size")
    run.add_argument("--participation", type=float)
    run.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    run.add_argument("--pretrain-lr", type=float, dest="pretrain_lr")
    run.add_argument("--seed", type=int, action="append", dest="seeds", metavar="SEED",
                     help="replicate seed (repeatable)")
    run.add_argument("--output", dest="output_dir", help="artifact directory")

    sweep = sub.add_parser("sweep", help="run a framework x partition x seed grid")
    sweep.add_argument("--config", help="base JSON configuration for every cell")
    sweep.add_argument("--frameworks", required=True,
                       help="comma-separated framework names")
    sweep.add_argument("--partitions", required=True,
                       help="comma-separated alpha values and/or 'iid'")
    sweep.add_argument("--seeds", required=True, help="comma-separated seeds")
    sweep.add_argument("--output", dest="output_dir", required=True,
                       help="sweep root directory")

    inspect = sub.add_parser("inspect", help="describe a saved checkpoint")
    inspect.add_argument("checkpoint", help="path to a checkpoint container")
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name in ("framework", "rounds", "clients", "split_fraction", "lr",
                 "weight_decay", "epochs", "batch_size", "participation",
                 "pretrain_epochs", "pretrain_lr", "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "tasks", None) is not None:
        overrides["tasks"] = default_tasks(args.tasks)
    if getattr(args, "iid", False):
        overrides["alpha"] = None
    elif getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(args.seeds)
    return config.replace(**overrides) if overrides else config


def _cmd_run(args: argparse.Namespace) -> int:
    from .harness import run_experiment

    config = _config_from_args(args)
    results = run_experiment(config)
    for result in results:
        accuracy = result["summary"]["final_accuracy"][config.framework]
        formatted = ", ".join(f"task {t}: {accuracy[t]:.4f}" for t in sorted(accuracy, key=int))
        print(f"seed {result['seed']}: {formatted}")
        print(f"artifacts: {result['out_dir']}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    from .harness import sweep

    base = load_config(args.config) if args.config else ExperimentConfig()
    frameworks = [f for f in args.frameworks.split(",") if f]
    alphas = [_parse_alpha(a) for a in args.partitions.split(",") if a]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError:
        raise ConfigurationError(f"seeds must be integers, got {args.seeds!r}") from None
    manifest = sweep(base, frameworks, alphas, seeds, args.output_dir)
    failed = [c["name"] for c in manifest["cells"] if c["status"] != "ok"]
    print(f"{len(manifest['cells'])} cells, {len(failed)} failed -> {args.output_dir}")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    from .serialize import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    backbone = state.backbone
    info = {
        "round": state.round_idx,
        "split_fraction": state.split_fraction,
        "provenance": backbone.provenance,
        "input_shape": list(backbone.input_shape),
        "layers": [{"name": l.name, "kind": l.kind} for l in backbone.layers],
        "tasks": sorted(state.predictors),
        "predictor_tensors": {str(t): len(tree) for t, tree in state.predictors.items()},
        "masks": [
            {"client": client, "task": task, "rho": mask.rho,
             "kept_channels": {name: int(bits.sum()) for name, bits in
                               sorted(mask.channel_keep.items())}}
            for (client, task), mask in sorted(state.masks.items())
        ],
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_inspect(args)
    except FedLPSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _classify(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
