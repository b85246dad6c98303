"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import AirknowError, ConfigError


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors on exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_common(sub):
    sub.add_argument("--config", required=True, help="TOML run configuration")
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--out", default=None, help="override the output directory")
    sub.add_argument("--sigma", type=float, default=None,
                     help="override the training noise ratio")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE",
                     help="dotted config override, e.g. eki.dropout=0.2")


def build_parser() -> _Parser:
    parser = _Parser(prog="airknow",
                     description="robust composed-retrieval training pipeline")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("gen", "generate train/val/detect datasets"),
        ("arbitrate", "build the arbitrated anchor set"),
        ("train-eki", "stage 1: train the confidence proxy"),
        ("train", "stage 2: train the embedding heads"),
        ("eval", "compute retrieval and detection metrics"),
        ("ablate", "run the full pipeline or a named ablation"),
        ("sweep", "sensitivity sweep over p or lambda"),
        ("report", "print a digest of a finished run"),
    ]:
        sub = subs.add_parser(name, help=text)
        _add_common(sub)
        if name == "ablate":
            sub.add_argument("--variant", default="full",
                             help="one of: " + ", ".join(harness.VARIANTS))
        if name == "sweep":
            sub.add_argument("--param", required=True, choices=("p", "lambda"))
            sub.add_argument("--values", default=None,
                             help="comma-separated sweep values")
    return parser


def _collect_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.sigma is not None:
        overrides["noise.sigma"] = str(args.sigma)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _dispatch(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out_dir = Path(cfg.out)
    if args.command in ("gen", "arbitrate", "train-eki", "train", "eval"):
        harness.run_until(cfg, args.command, out_dir)
        if args.command == "eval":
            print(harness.format_report(out_dir))
    elif args.command == "ablate":
        harness.run_variant(cfg, args.variant,
                            out_dir if args.variant == "full" else None)
        target = out_dir if args.variant == "full" \
            else out_dir / "variants" / args.variant
        print(harness.format_report(target))
    elif args.command == "sweep":
        values = None
        if args.values:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        summary = harness.run_sweep(cfg, args.param, values)
        print(f"sweep over {args.param}: peak r@1 {summary['peak_r_at_1']:.4f} "
              f"at {args.param}={summary['peak_value']}")
    elif args.command == "report":
        print(harness.format_report(out_dir))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except AirknowError as exc:
        print(f"airknow: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:                                # noqa: BLE001
        print(f"airknow: unexpected failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
