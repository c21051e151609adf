import os

# Single-threaded BLAS keeps per-run results independent of the worker count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import asyncio
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from tools.grid_search import GridRunner, plan_cells
from tools.report_generator import ReportGenerator
from utils.config import Settings, build_settings, load_config, parse_overrides
from utils.data_processor import KIND_BASELINE, KIND_REFERENCE, KIND_SSL, CellKey
from utils.errors import ConfigurationError, OTSSLError, ReportError

# -------------------------
# Bootstrap & configuration
# -------------------------
BASE_DIR = Path(__file__).parent
TEMPLATES_DIR = BASE_DIR / "templates"
CONFIG_PATH = BASE_DIR / "config.yaml"

load_dotenv(override=False)

logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "INFO"),
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger("ot-ssl-gnss")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", type=Path, default=CONFIG_PATH, help="YAML or JSON config file")
    common.add_argument("--profile", choices=["full", "desk"], default=None)
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: config, env, cpu count)")

    parser = argparse.ArgumentParser(
        prog="cli.py",
        allow_abbrev=False,
        description="Semi-supervised multipath detection on GNSS I/Q images with optimal transport similarity.",
        epilog="Any config field can be overridden with --key value (dotted keys for sections).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], allow_abbrev=False, help="generate the datasets of every grid point")
    p.add_argument("--master-seed", type=int, default=None)

    p = sub.add_parser("distances", parents=[common], allow_abbrev=False, help="build the EMD distance caches of every grid point")
    p.add_argument("--master-seed", type=int, default=None)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="run one grid cell")
    p.add_argument("--master-seed", type=int, default=None)
    p.add_argument("--cn0", type=float, required=True, help="C/N0 in dBHz")
    p.add_argument("--n-sup", type=int, required=True, help="labelled training samples")
    p.add_argument("--lam", type=float, default=0.0, help="regularization weight, 0 for the baseline")
    p.add_argument("--sigma", type=float, default=None, help="kernel bandwidth (required when --lam > 0)")
    p.add_argument("--reference", action="store_true", help="fully supervised cell with n_train = n_sup")
    p.add_argument("--save-checkpoints", action="store_true", help="keep the final parameters of every run")

    p = sub.add_parser("grid", parents=[common], allow_abbrev=False, help="run (or resume) the full grid")
    p.add_argument("--master-seed", type=int, required=True)
    p.add_argument("--save-checkpoints", action="store_true")

    sub.add_parser("report", parents=[common], allow_abbrev=False, help="statistics, best pairs and plot data of finished cells")
    return parser


def load_settings(args: argparse.Namespace, extra: Sequence[str]) -> Settings:
    overrides: Dict[str, Any] = parse_overrides(extra)
    if getattr(args, "master_seed", None) is not None:
        overrides["master_seed"] = args.master_seed
    raw = load_config(args.config)
    return build_settings(raw, profile=args.profile, overrides=overrides)


def _single_cell(args: argparse.Namespace, settings: Settings) -> CellKey:
    if args.reference:
        if args.lam != 0:
            raise ConfigurationError("a reference cell has lambda = 0")
        return CellKey(args.cn0, args.n_sup, args.n_sup, 0.0, None, KIND_REFERENCE)
    if args.lam == 0:
        return CellKey(args.cn0, args.n_sup, settings.experiment.n_train, 0.0, None, KIND_BASELINE)
    if args.sigma is None:
        raise ConfigurationError("--sigma is required when --lam > 0")
    if args.n_sup > settings.experiment.n_train:
        raise ConfigurationError(f"n_sup={args.n_sup} exceeds n_train={settings.experiment.n_train}")
    return CellKey(args.cn0, args.n_sup, settings.experiment.n_train, args.lam, args.sigma, KIND_SSL)


def _points(cells: List[CellKey]) -> Dict[Any, bool]:
    """Grid points in plan order, flagged when some cell there needs distances."""
    out: Dict[Any, bool] = {}
    for key in cells:
        out[key.point] = out.get(key.point, False) or key.lam > 0
    return out


def cmd_generate(runner: GridRunner, with_distances: bool) -> Dict[str, Any]:
    export = runner.output_dir / "datasets"
    written = []
    for (cn0, n_sup, n_train), needs in _points(plan_cells(runner.cfg)).items():
        train, val = runner.datasets(cn0, n_sup, n_train)
        target = export / f"cn0_{cn0:g}__nsup_{n_sup}__ntrain_{n_train}"
        train.save(target / "train")
        val.save(target / "val")
        if with_distances and needs:
            runner.distances(train).save(target / "distances")
        written.append(str(target))
    return {"points": len(written), "dir": str(export)}


def cmd_report(settings: Settings, runner: GridRunner) -> Dict[str, Any]:
    table = runner.load_table()
    if table.empty:
        raise ReportError(f"no finished cells under {runner.cells_dir}")
    generator = ReportGenerator(
        output_dir=str(runner.output_dir / "report"),
        templates_dir=str(TEMPLATES_DIR),
        logger=logger,
        formats=settings.reporting.formats,
    )
    return asyncio.run(generator.generate_all(table))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    start_ts = time.perf_counter()
    try:
        settings = load_settings(args, extra)
        runner = GridRunner(settings, logger=logger, workers=args.workers,
                            save_checkpoints=getattr(args, "save_checkpoints", False))
        logger.info(
            "command started | command=%s profile=%s output_dir=%s workers=%s",
            args.command, args.profile or "full", settings.experiment.output_dir, runner.workers,
        )
        if args.command == "generate":
            summary: Any = cmd_generate(runner, with_distances=False)
        elif args.command == "distances":
            summary = cmd_generate(runner, with_distances=True)
        elif args.command == "train":
            summary = runner.run(cells=[_single_cell(args, settings)]).to_dict(orient="records")
        elif args.command == "grid":
            table = runner.run()
            summary = {"cells": len(table), "dir": str(runner.cells_dir)}
        else:
            summary = cmd_report(settings, runner)
    except OTSSLError as e:
        logger.error("%s failed | %s: %s", args.command, type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed | I/O error: %s", args.command, e)
        return 2
    print(json.dumps(summary, indent=2, default=str))
    logger.info("command finished | command=%s | duration=%.3fs", args.command, time.perf_counter() - start_ts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
