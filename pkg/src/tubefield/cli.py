"""Command-line entry point: ``tubefield <command> --config CFG [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, Experiment, StageError

COMMANDS = {
    "forward": "run the finite-difference reference to steady state (fdm/)",
    "synth-obs": "sample and corrupt the pressure at x=L (obs/)",
    "train": "train the field network (gamma/)",
    "evaluate": "compare the network field and boundary signals with the reference (eval/)",
    "ftm": "fine-tune the network together with (alpha, beta) (inverse/ftm*)",
    "tom": "least-squares fits on network and reference boundary signals (inverse/tom*.json)",
    "run-all": "every stage in order, then table2.json",
    "calibrate-xi": "print the output scale from a coarse finite-difference run",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _schema_epilog() -> str:
    lines = ["configuration keys (--set KEY=VALUE):"]
    for key, info in harness.schema().items():
        units = f" [{info['units']}]" if info["units"] else ""
        lines.append(f"  {key}{units} = {json.dumps(info['default'])}  {info['doc']}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tubefield", description="Acoustic tube field reconstruction and "
                     "radiation coefficient estimation.")
    parser.add_argument("--print-schema", action="store_true",
                        help="print every configuration key with units and defaults as JSON")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    epilog = _schema_epilog()
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True,
                       help="JSON config file, or a bundled preset: reference, desk, smoke")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", help="run directory (default: $TUBEFIELD_OUT/<name>-<hash>)")
        p.add_argument("--seed", type=int, help="set both the network and the noise seed")
        verb = p.add_mutually_exclusive_group()
        verb.add_argument("--quiet", action="store_true")
        verb.add_argument("--verbose", action="store_true")
    return parser


def _load(args) -> harness.ExperimentConfig:
    try:
        cfg = harness.load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"network.seed={args.seed}", f"noise.seed={args.seed}"]
    try:
        return cfg.with_overrides(overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _dispatch(args) -> int:
    cfg = _load(args)
    if args.command == "calibrate-xi":
        print(json.dumps({"xi": harness.calibrate_xi(cfg)}))
        return 0
    out = Path(args.out) if args.out else harness.run_directory(cfg)
    exp = Experiment(cfg, out)
    if args.command == "run-all":
        exp.run_all()
    else:
        {
            "forward": exp.forward,
            "synth-obs": exp.synth_obs,
            "train": exp.train,
            "evaluate": exp.evaluate,
            "ftm": exp.ftm,
            "tom": exp.tom,
        }[args.command]()
    print(out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_schema:
            print(json.dumps(harness.schema(), indent=2))
            return 0
        if args.command is None:
            raise UsageError(parser.format_usage())
        level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
        return _dispatch(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
