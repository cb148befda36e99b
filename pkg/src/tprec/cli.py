"""Command line entry point: ``tprec <stage> --config FILE [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, PipelineConfig, load_config
from .data import DataFormatError
from .pipeline import STAGES, PipelineError, pipeline_stages, run_stage

log = logging.getLogger("tprec")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tprec", description="Time-aware path reasoning recommender pipeline")
    p.add_argument("stage", choices=[*STAGES, "all"], help="stage to run ('all' runs every stage in order)")
    p.add_argument("--config", type=Path, help="YAML config; defaults are used when omitted")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, help="artifact directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def _threads() -> int | None:
    raw = os.environ.get("TPREC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TPREC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TPREC_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig().validate()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output = str(args.out)
        stages = pipeline_stages(cfg) if args.stage == "all" else [args.stage]
        with threadpool_limits(limits=_threads()):
            for stage in stages:
                man = run_stage(stage, cfg)
                log.info("%s -> %s", stage, ", ".join(man["outputs"]))
    except (ConfigError, PipelineError, DataFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
