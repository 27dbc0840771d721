"""Command line entry point: ``ddspc <verb> --config FILE [options]``.

Exit codes: 0 ok, 1 runtime error (e.g. missing artifact), 2 config error,
3 verification fail, 4 safety violation in strict mode, 5 identification
BFR below the configured floor.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys

from . import pipeline as pl
from .config import ConfigError, load_config, validate

VERBS = ("identify", "train-policy", "verify-policy", "simulate", "compare", "bench")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddspc", description="data-driven safe predictive control pipeline")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("runs", nargs="*", help="compare: simulated run directories (default: all under --out)")
    ap.add_argument("--config", required=True, help="experiment TOML file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("--controller", default="all", choices=pl.CONTROLLERS + ("all",),
                    help="simulate: which controller to run (default all)")
    ap.add_argument("--strict", action="store_true", help="simulate: exit 4 on any h(x) > 0")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.out is not None:
            over["out"] = args.out
        if over:
            cfg = dataclasses.replace(cfg, **over)
            validate(cfg)
        if args.runs and args.verb != "compare":
            raise ConfigError(f"{args.verb} takes no positional arguments")
        if args.verb == "identify":
            return pl.cmd_identify(cfg)
        if args.verb == "train-policy":
            return pl.cmd_train_policy(cfg)
        if args.verb == "verify-policy":
            return pl.cmd_verify_policy(cfg)
        if args.verb == "simulate":
            return pl.cmd_simulate(cfg, args.controller, args.strict or None)
        if args.verb == "compare":
            return pl.cmd_compare(cfg, args.runs)
        return pl.cmd_bench(cfg)
    except ConfigError as e:
        print(f"ddspc: config error: {e}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except pl.PipelineError as e:
        print(f"ddspc: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
