"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(divergence, corrupt or mismatched checkpoint, missing inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import pipeline
from .checkpoint import CheckpointError
from .config import RunConfig, json_schema, load_config
from .corpus import CorpusError
from .numerics import NonFiniteError
from .training import VARIANTS, TrainingDivergence

COMMANDS = ("gen-corpus", "prune", "finetune", "route", "sample", "eval", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptprune", description="Prompt-conditioned pruning of a toy diffusion model into experts.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--experts", type=int, help="number of experts N")
    p.add_argument("--prompts", type=Path, help="prompts.jsonl to route (route only)")
    p.add_argument("--force", action="store_true", help="load checkpoints whose config hash differs")
    p.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.experts is not None and args.experts < 1:
        raise ValueError("--experts must be >= 1")
    return cfg.with_overrides(seed=args.seed, variant=args.variant, experts=args.experts)


def _dispatch(cmd: str, cfg: RunConfig, args) -> None:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if cmd == "gen-corpus":
        pipeline.stage_gen_corpus(cfg, out)
    elif cmd == "prune":
        pipeline.stage_prune(cfg, out)
    elif cmd == "finetune":
        pipeline.stage_finetune(cfg, out, force=args.force)
    elif cmd == "route":
        pipeline.stage_route(cfg, out, prompts=args.prompts, force=args.force)
    elif cmd == "sample":
        pipeline.stage_sample(cfg, out, force=args.force)
    elif cmd == "eval":
        pipeline.stage_eval(cfg, out, force=args.force)
    elif cmd == "report":
        sys.stdout.write(pipeline.stage_report(cfg, out))


def run_command(argv: list[str] | None = None) -> int:
    if argv is not None and "--print-schema" in argv:
        print(json.dumps(json_schema(), indent=2, sort_keys=True))
        return 0
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ValidationError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    try:
        _dispatch(args.command, cfg, args)
    except (TrainingDivergence, NonFiniteError) as err:
        print(f"diverged: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, CorpusError, FileNotFoundError, OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
