"""Command-line entry point: ``binaural-si <stage> --out RUN_DIR [options]``.

Exit status is 0 on success, 1 for usage or configuration errors, 2 for
data errors (missing inputs, shape mismatches) and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGE_NAMES = ("gen-data", "label", "train-vqcpc", "extract", "train-predictor", "evaluate", "predict")
RESOLVED = "resolved_config.yaml"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help=f"YAML config; defaults to RUN_DIR/{RESOLVED} if present")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="binaural-si", description="Binaural speech intelligibility prediction pipeline.")
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for name in STAGE_NAMES:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "predict"):
            p.add_argument("--head", type=Path, help="predictor head checkpoint to use")
        if name == "predict":
            p.add_argument("--wav", type=Path, required=True, help="2-channel WAV to score")
    return parser


def _setup_logging(run: Path, stage: str, verbose: bool) -> logging.Handler:
    (run / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run / "logs" / f"{stage}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("binaural_si")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    if verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))
    return handler


def _resolve_config(args):
    path = args.config
    if path is None and (args.out / RESOLVED).is_file():
        path = args.out / RESOLVED
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(path, overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    handler = None
    try:
        cfg = _resolve_config(args)
        run_dir = args.out
        run_dir.mkdir(parents=True, exist_ok=True)
        handler = _setup_logging(run_dir, args.stage, args.verbose)
        (run_dir / RESOLVED).write_text(cfg.to_yaml(), encoding="utf-8")
        logging.getLogger("binaural_si").info("stage %s, seed %d, preset %s", args.stage, cfg.seed, cfg.preset)

        if args.stage == "gen-data":
            pipeline.gen_data(cfg, run_dir, cfg.seed, args.workers)
        elif args.stage == "label":
            pipeline.label(cfg, run_dir, args.workers)
        elif args.stage == "train-vqcpc":
            pipeline.train_vqcpc_stage(cfg, run_dir, cfg.seed)
        elif args.stage == "extract":
            pipeline.extract(cfg, run_dir)
        elif args.stage == "train-predictor":
            pipeline.train_predictor_stage(cfg, run_dir, cfg.seed)
        elif args.stage == "evaluate":
            report = pipeline.evaluate(cfg, run_dir, args.head)
            sys.stdout.write(report.to_table())
        elif args.stage == "predict":
            print(f"{pipeline.predict(cfg, run_dir, args.wav, args.head):.6f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if handler is not None:
            logging.getLogger("binaural_si").removeHandler(handler)
            handler.close()
    return EXIT_OK


def main():
    sys.exit(run())
