"""Command line entry points.

One subcommand per pipeline stage plus `synth` and `ingest`. Stage
commands read an optional config file; any key can be overridden from
the command line with repeated --set section.key=value flags.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys

from .config import load_config
from .pipeline import STAGES, ingest, run_stage
from .synth import SyntheticSpec, write_synthetic

log = logging.getLogger(__name__)


def _add_config_options(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="path to a run config file")
    sub.add_argument("--set", dest="overrides", action="append",
                     default=[], metavar="SECTION.KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, default=None,
                     help="shorthand for --set run.seed=...")
    sub.add_argument("--output-dir", default=None,
                     help="shorthand for --set paths.output_dir=...")


def _config_from(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"paths.output_dir={args.output_dir}")
    return load_config(args.config, overrides)


def _parse_drift(text: str, snapshots: int) -> list:
    if text == "rotate":
        return list(range(snapshots))
    if text == "none":
        return [0] * snapshots
    return [int(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tardgr",
        description="temporal recommendation with retrieval-augmented "
                    "subgraph fusion")
    parser.add_argument("--verbose", action="store_true",
                        help="log training progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser(
        "synth", help="generate a synthetic interaction file")
    synth.add_argument("--users", type=int, default=20)
    synth.add_argument("--items", type=int, default=20)
    synth.add_argument("--blocks", type=int, default=4)
    synth.add_argument("--within-prob", type=float, default=0.9)
    synth.add_argument("--snapshots", type=int, default=5)
    synth.add_argument("--events", type=int, default=200,
                       help="interaction events per snapshot")
    synth.add_argument("--drift", default="none",
                       help="comma-separated per-snapshot block offsets, "
                            "or 'rotate' / 'none'")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--interactions", required=True,
                       help="output interaction file")
    synth.add_argument("--assignments", default=None,
                       help="optional block-assignment sidecar file")

    for name in ("ingest",) + STAGES:
        sub = commands.add_parser(name, help=f"run the {name} stage")
        _add_config_options(sub)
    return parser


def _print_info(info: dict) -> None:
    for key, value in info.items():
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        print(f"{key} {value}")


def _run_synth(args) -> dict:
    drift = _parse_drift(args.drift, args.snapshots)
    spec = SyntheticSpec(users=args.users, items=args.items,
                         blocks=args.blocks, within_prob=args.within_prob,
                         drift=drift, snapshots=args.snapshots,
                         events_per_snapshot=args.events, seed=args.seed)
    assignments = args.assignments or args.interactions + ".blocks"
    write_synthetic(spec, args.interactions, assignments)
    return {"interactions": args.interactions,
            "assignments": assignments,
            "events": spec.snapshots * args.events}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            info = _run_synth(args)
        elif args.command == "ingest":
            info = ingest(_config_from(args))
        else:
            info = run_stage(args.command, _config_from(args))
    except (ValueError, FileNotFoundError, OSError,
            configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_info(info)
    return 0


if __name__ == "__main__":
    sys.exit(main())
