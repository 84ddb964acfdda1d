"""``pemma`` command line.

    pemma pretrain|adapt|continual|eval|prognosis|report --config FILE
          [--seed N] [--out DIR] [--method pemma_lora|pemma_dora|early|late]
          [--modes ct,pet,ctpet] [--scope peft_only|wide]

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else raised by the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from pemma.config import METHODS, RunConfig, STAGES, load_config
from pemma.exceptions import ConfigError, PemmaError

log = logging.getLogger("pemma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pemma", description="Staged CT/PET segmentation and prognosis runs.")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="run config YAML (schema_version 1); defaults are used without one")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--modes", help="comma separated subset of ct,pet,ctpet")
    parser.add_argument("--scope", choices=("peft_only", "wide"))
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.method is not None:
        over["method"] = args.method
    if args.modes is not None:
        over["modes"] = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if args.scope is not None:
        over["scope"] = args.scope
    return replace(cfg, stage=args.stage, **over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # the pipeline pulls in numpy-heavy modules; keep --help fast
    from pemma.pipeline import run_stage

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.out is not None and args.config:
            # command-line paths are relative to the working directory
            args.out = str(Path(args.out).resolve())
        cfg = apply_overrides(cfg, args)
        record = run_stage(args.stage, cfg)
    except ConfigError as exc:
        print(f"pemma: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except PemmaError as exc:
        print(f"pemma: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"stage": record["stage"], "seconds": record["wall_clock_seconds"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
