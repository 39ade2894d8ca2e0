"""Command-line entry point.

    latentplan <command> --config PATH [--seed N] [--out DIR] [--override key=value ...]

Exit codes: 0 success, 2 configuration error, 3 missing or stale artifact,
4 numerical failure. ``LP_THREADS`` caps the number of torch threads
(default 1, which also keeps runs reproducible).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from .config import ConfigError, load_config
from .diff_core.checkpoint import CheckpointError
from .energy_guidance import StoreError
from .env_data import DatasetError
from .pipeline import STAGES, ArtifactError, run_command
from .planner import IncompatibleModels

COMMANDS = STAGES + ("ablate",)
EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("latentplan")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentplan", description="Latent-action diffusion planning pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file or bundled preset name")
    p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a knob by dotted path; the value is parsed as JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def set_threads() -> int:
    raw = os.environ.get("LP_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ConfigError("LP_THREADS", f"expected a positive integer, got {raw!r}") from None
    n = min(n, os.cpu_count() or 1)
    torch.set_num_threads(n)
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads()
        cfg = load_config(args.config, args.override, args.seed, args.out)
        result = run_command(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, IncompatibleModels, CheckpointError, StoreError, DatasetError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    metrics = result.get("metrics", result)
    print(json.dumps({"command": args.command, "out": cfg["out"], "metrics": metrics}, sort_keys=True,
                     default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
