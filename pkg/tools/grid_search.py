"""Resumable grid search over (C/N0, N_SUP, lambda, sigma).

Output layout under ``experiment.output_dir``::

    cells/<cell_id>/cell_config.json    configuration and its hash
    cells/<cell_id>/runs/run_XXXX.csv   epoch rows of one run
    cells/<cell_id>/runs/run_XXXX.json  run summary, written last
    cells/<cell_id>/epochs.csv          all epoch rows in run order
    cells/<cell_id>/cell.json           statistics of the cell
    .cache/                             datasets and distance caches by content key

A run is done once its JSON summary exists; a cell is aggregated once all
of its runs are done.
"""
import asyncio
import json
import logging
import os
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from tools.gnss_synth import GENERATOR_VERSION, Dataset, GridSpec, generate_dataset
from tools.nn_core import save_checkpoint
from tools.ot_metric import DistanceCache, build_cost_matrix, build_distance_cache
from tools.ssl_train import RunResult, SSLConfig, train_run
from utils.cache_manager import CacheManager
from utils.config import ExperimentConfig, Settings, content_hash
from utils.data_processor import (
    KIND_BASELINE,
    KIND_REFERENCE,
    KIND_SSL,
    CellKey,
    CellStatistics,
    DataProcessor,
)
from utils.errors import ConfigurationError, PersistenceError, ResumeMismatchError
from utils.seeding import derive_seed

RESULTS_FORMAT = "grid-results/1"
EPOCH_COLUMNS = ["run_id", "epoch", "val_accuracy", "train_loss"]


def plan_cells(cfg: ExperimentConfig) -> List[CellKey]:
    """Baseline plus every (lambda, sigma) cell per operating point, then reference cells.

    lambda = 0 entries of the grid are the baseline cell and are not repeated.
    """
    cells: List[CellKey] = []
    lambdas = [lam for lam in dict.fromkeys(cfg.lambda_grid) if lam > 0]
    sigmas = list(dict.fromkeys(cfg.sigma_grid))
    for cn0 in dict.fromkeys(cfg.cn0_list):
        for n_sup in dict.fromkeys(cfg.nsup_list):
            cells.append(CellKey(float(cn0), int(n_sup), cfg.n_train, 0.0, None, KIND_BASELINE))
            for lam in lambdas:
                for sigma in sigmas:
                    cells.append(CellKey(float(cn0), int(n_sup), cfg.n_train, float(lam), float(sigma), KIND_SSL))
        for n in dict.fromkeys(cfg.reference_nsup_list):
            cells.append(CellKey(float(cn0), int(n), int(n), 0.0, None, KIND_REFERENCE))
    return cells


def run_seed(master_seed: int, key: CellKey, run_index: int) -> int:
    return derive_seed(master_seed, key.cn0, key.n_sup, key.lam, key.sigma, run_index)


def dataset_seed(master_seed: int, cn0: float, n_sup: int, n_train: int, run_index: Optional[int] = None) -> int:
    return derive_seed("dataset", master_seed, cn0, n_sup, n_train, run_index)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e


def _dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def epoch_frame(result: RunResult) -> pd.DataFrame:
    n = len(result.val_accuracies)
    return pd.DataFrame({
        "run_id": [result.run_id] * n,
        "epoch": list(range(1, n + 1)),
        "val_accuracy": result.val_accuracies,
        "train_loss": result.train_losses,
    }, columns=EPOCH_COLUMNS)


def write_run_files(result: RunResult, run_dir: Path, run_index: int, key: CellKey) -> Path:
    """Per-run CSV of epoch rows, then the JSON summary that marks the run done."""
    stem = run_dir / f"run_{run_index:04d}"
    _atomic_write(stem.with_suffix(".csv"), epoch_frame(result).to_csv(index=False, lineterminator="\n"))
    summary = {
        "run_id": result.run_id,
        "run_index": run_index,
        "seed": result.seed,
        "cell": key.to_dict(),
        "max_accuracy": result.max_accuracy,
        "final_train_loss": result.final_train_loss,
        "val_accuracies": result.val_accuracies,
        "train_losses": result.train_losses,
    }
    _atomic_write(stem.with_suffix(".json"), _dumps(summary))
    return stem.with_suffix(".json")


@dataclass
class GroupData:
    """Datasets and distances shared by every cell of one operating point."""
    train: Dataset
    val: Dataset
    distances: Optional[DistanceCache] = None


@dataclass(frozen=True)
class RunJob:
    key: CellKey
    run_index: int
    seed: int
    dataset_seed: int
    run_dir: str

    @property
    def run_id(self) -> str:
        return f"{self.key.cell_id}/run_{self.run_index:04d}"


# Worker-process state for run jobs.
_JOB_STATE: Dict[str, Any] = {}


def _init_job_worker(settings: Settings, group: Optional[GroupData], save_checkpoints: bool) -> None:
    _JOB_STATE.update(settings=settings, group=group, save_checkpoints=save_checkpoints)


def _execute_job(job: RunJob) -> Tuple[str, float]:
    settings: Settings = _JOB_STATE["settings"]
    group: Optional[GroupData] = _JOB_STATE["group"]
    key = job.key
    exp = settings.experiment
    if group is None:
        grid = GridSpec.from_config(settings.synthesis)
        train, val = generate_dataset(grid, key.n_sup, key.cn0, job.dataset_seed, n_train=key.n_train,
                                      n_val=exp.n_val, synthesis=settings.synthesis)
        distances = None
        if key.lam > 0:
            distances = build_distance_cache(train, build_cost_matrix(grid), settings.solver)
        group = GroupData(train, val, distances)

    cfg = SSLConfig(
        lam=key.lam,
        sigma=key.sigma if key.sigma is not None else 1.0,
        batch_size=exp.batch_size,
        epochs=exp.epochs,
        seed=job.seed,
        standardize_inputs=settings.model.standardize_inputs,
    )
    result, params = train_run(group.train, group.val, cfg, group.distances, settings.optimizer, run_id=job.run_id)
    run_dir = Path(job.run_dir)
    if _JOB_STATE.get("save_checkpoints"):
        save_checkpoint(params, run_dir.parent / "checkpoints" / f"run_{job.run_index:04d}")
    write_run_files(result, run_dir, job.run_index, key)
    return job.run_id, result.max_accuracy


class GridRunner:
    def __init__(self, settings: Settings, logger: Optional[logging.Logger] = None,
                 cache: Optional[CacheManager] = None, workers: Optional[int] = None,
                 save_checkpoints: bool = False) -> None:
        self.settings = settings
        self.cfg = settings.experiment
        self.logger = logger or logging.getLogger("ot-ssl-gnss")
        self.output_dir = Path(self.cfg.output_dir)
        self.cells_dir = self.output_dir / "cells"
        self.workers = workers or self.cfg.resolved_workers()
        self.grid = GridSpec.from_config(settings.synthesis)
        self.save_checkpoints = save_checkpoints
        self.processor = DataProcessor()
        cache_dir = Path(settings.cache.dir)
        if not cache_dir.is_absolute():
            cache_dir = self.output_dir / cache_dir
        self.cache = cache or CacheManager(settings.cache, default_dir=str(cache_dir), logger=self.logger)

    def master_seed(self) -> int:
        if self.cfg.master_seed is None:
            raise ConfigurationError("master_seed is required (--master-seed)")
        return int(self.cfg.master_seed)

    # ---- cell bookkeeping ----

    def cell_dir(self, key: CellKey) -> Path:
        return self.cells_dir / key.cell_id

    def cell_config(self, key: CellKey) -> Dict[str, Any]:
        """Everything a run of this cell depends on; grid lists and run count are excluded."""
        return {
            "format": RESULTS_FORMAT,
            "generator": GENERATOR_VERSION,
            "cell": key.to_dict(),
            "master_seed": self.cfg.master_seed,
            "epochs": self.cfg.epochs,
            "batch_size": self.cfg.batch_size,
            "n_val": self.cfg.n_val,
            "dataset_per_run": self.cfg.dataset_per_run,
            "synthesis": self.settings.synthesis.model_dump(mode="json"),
            "solver": self.settings.solver.model_dump(mode="json"),
            "model": self.settings.model.model_dump(mode="json"),
            "optimizer": self.settings.optimizer.model_dump(mode="json"),
        }

    def prepare_cell(self, key: CellKey) -> List[int]:
        """Create or check the cell directory; returns the run indices still to do."""
        config = self.cell_config(key)
        digest = content_hash(config)
        cell_dir = self.cell_dir(key)
        marker = cell_dir / "cell_config.json"
        if marker.exists():
            try:
                stored = json.loads(marker.read_text("utf-8"))
            except (OSError, ValueError) as e:
                raise PersistenceError(f"cannot read {marker}: {e}") from e
            if stored.get("config_hash") != digest:
                raise ResumeMismatchError(
                    f"{cell_dir} holds results of another configuration "
                    f"({stored.get('config_hash', '?')[:12]} != {digest[:12]})"
                )
        else:
            try:
                (cell_dir / "runs").mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise PersistenceError(f"cannot create {cell_dir}: {e}") from e
            _atomic_write(marker, _dumps({"config_hash": digest, "config": config}))
        runs = cell_dir / "runs"
        return [i for i in range(self.cfg.runs_per_cell) if not (runs / f"run_{i:04d}.json").exists()]

    def _job(self, key: CellKey, run_index: int) -> RunJob:
        master = self.master_seed()
        ds_index = run_index if self.cfg.dataset_per_run else None
        return RunJob(
            key=key,
            run_index=run_index,
            seed=run_seed(master, key, run_index),
            dataset_seed=dataset_seed(master, key.cn0, key.n_sup, key.n_train, ds_index),
            run_dir=str(self.cell_dir(key) / "runs"),
        )

    # ---- shared artifacts ----

    def datasets(self, cn0: float, n_sup: int, n_train: int) -> Tuple[Dataset, Dataset]:
        """Training and validation sets of an operating point, reused through the cache."""
        seed = dataset_seed(self.master_seed(), cn0, n_sup, n_train)
        spec = {
            "generator": GENERATOR_VERSION, "seed": seed, "cn0": cn0, "n_sup": n_sup, "n_train": n_train,
            "n_val": self.cfg.n_val,
            "synthesis": self.settings.synthesis.model_dump(mode="json"),
        }
        key = "dataset-" + content_hash(spec)[:24]
        base = self.cache.artifact_dir(key)
        manifest = self.cache.get(key)
        if manifest:
            try:
                train, val = Dataset.load(base / "train"), Dataset.load(base / "val")
                if train.content_hash() == manifest.get("train_hash") and val.content_hash() == manifest.get("val_hash"):
                    self.logger.info("dataset reused | cn0=%s n_sup=%s n_train=%s key=%s", cn0, n_sup, n_train, key)
                    return train, val
                self.logger.warning("Cached dataset %s does not match its manifest, regenerating", key)
                self.cache.invalidate(key)
            except PersistenceError as e:
                self.logger.warning("Cached dataset %s unreadable, regenerating: %s", key, e)
                self.cache.invalidate(key)

        train, val = generate_dataset(self.grid, n_sup, cn0, seed, n_train=n_train, n_val=self.cfg.n_val,
                                      synthesis=self.settings.synthesis, logger=self.logger)
        if self.cache.enabled:
            train.save(base / "train")
            val.save(base / "val")
            self.cache.set(key, dict(spec, train_hash=train.content_hash(), val_hash=val.content_hash()))
        return train, val

    def distances(self, train: Dataset) -> DistanceCache:
        train_hash = train.content_hash()
        key = "distances-" + content_hash({
            "dataset": train_hash, "solver": self.settings.solver.model_dump(mode="json"),
        })[:24]
        base = self.cache.artifact_dir(key)
        if self.cache.get(key):
            try:
                cached = DistanceCache.load(base, expected_hash=train_hash)
                self.logger.info("distance cache reused | samples=%s key=%s", len(cached), key)
                return cached
            except PersistenceError as e:
                self.logger.warning("Cached distances %s unusable, rebuilding: %s", key, e)
                self.cache.invalidate(key)
        cache = build_distance_cache(train, build_cost_matrix(self.grid), self.settings.solver,
                                     workers=self.workers, logger=self.logger)
        if self.cache.enabled:
            cache.save(base)
            self.cache.set(key, {"dataset_hash": train_hash, "n": len(cache)})
        return cache

    # ---- execution ----

    async def _run_jobs(self, jobs: Sequence[RunJob], group: Optional[GroupData]) -> None:
        if self.workers <= 1 or len(jobs) == 1:
            _init_job_worker(self.settings, group, self.save_checkpoints)
            for job in jobs:
                _execute_job(job)
            return
        loop = asyncio.get_running_loop()
        init_args = (self.settings, group, self.save_checkpoints)
        with ProcessPoolExecutor(max_workers=min(self.workers, len(jobs)), initializer=_init_job_worker,
                                 initargs=init_args) as pool:
            futures = [loop.run_in_executor(pool, _execute_job, job) for job in jobs]
            for done, fut in enumerate(asyncio.as_completed(futures), start=1):
                run_id, max_acc = await fut
                self.logger.debug("run done | %s/%s | run_id=%s max_acc=%.4f", done, len(jobs), run_id, max_acc)

    async def run_async(self, cells: Optional[Sequence[CellKey]] = None) -> List[CellStatistics]:
        self.master_seed()
        cells = list(cells) if cells is not None else plan_cells(self.cfg)
        if not cells:
            raise ConfigurationError("the grid is empty")
        start_ts = time.perf_counter()
        pending = {key: self.prepare_cell(key) for key in cells}

        groups: "OrderedDict[Tuple[float, int, int], List[CellKey]]" = OrderedDict()
        for key in cells:
            groups.setdefault(key.point, []).append(key)

        total = sum(len(v) for v in pending.values())
        self.logger.info(
            "grid started | cells=%s runs_per_cell=%s pending_runs=%s workers=%s output_dir=%s",
            len(cells), self.cfg.runs_per_cell, total, self.workers, self.output_dir,
        )
        for (cn0, n_sup, n_train), keys in groups.items():
            jobs = [self._job(key, i) for key in keys for i in pending[key]]
            if not jobs:
                self.logger.info("group complete, skipped | cn0=%s n_sup=%s n_train=%s", cn0, n_sup, n_train)
                continue
            group_ts = time.perf_counter()
            group: Optional[GroupData] = None
            if not self.cfg.dataset_per_run:
                train, val = self.datasets(cn0, n_sup, n_train)
                needs_distances = any(job.key.lam > 0 for job in jobs)
                group = GroupData(train, val, self.distances(train) if needs_distances else None)
            await self._run_jobs(jobs, group)
            self.logger.info(
                "group finished | cn0=%s n_sup=%s n_train=%s cells=%s runs=%s | duration=%.3fs",
                cn0, n_sup, n_train, len(keys), len(jobs), time.perf_counter() - group_ts,
            )

        stats = [self.aggregate_cell(key) for key in cells]
        self.logger.info("grid finished | cells=%s | duration=%.3fs", len(cells), time.perf_counter() - start_ts)
        return stats

    def run(self, cells: Optional[Sequence[CellKey]] = None) -> pd.DataFrame:
        return self.processor.statistics_table(asyncio.run(self.run_async(cells)))

    # ---- aggregation ----

    def aggregate_cell(self, key: CellKey) -> CellStatistics:
        """Sequential pass over the first ``runs_per_cell`` run files of a cell."""
        cell_dir = self.cell_dir(key)
        runs = cell_dir / "runs"
        summaries: List[Dict[str, Any]] = []
        csv_parts: List[str] = []
        try:
            for i in range(self.cfg.runs_per_cell):
                stem = runs / f"run_{i:04d}"
                summaries.append(json.loads(stem.with_suffix(".json").read_text("utf-8")))
                text = stem.with_suffix(".csv").read_text("utf-8")
                csv_parts.append(text if i == 0 else text.split("\n", 1)[1])
            config = json.loads((cell_dir / "cell_config.json").read_text("utf-8"))
        except (OSError, ValueError) as e:
            raise PersistenceError(f"cell {key.cell_id} is incomplete: {e}") from e

        stats = CellStatistics.from_results(key, [s["max_accuracy"] for s in summaries])
        _atomic_write(cell_dir / "epochs.csv", "".join(csv_parts))
        _atomic_write(cell_dir / "cell.json", _dumps(dict(stats.to_dict(), config_hash=config["config_hash"])))
        return stats

    def load_statistics(self) -> List[CellStatistics]:
        """Statistics of every aggregated cell found under the output directory."""
        out = []
        for path in sorted(self.cells_dir.glob("*/cell.json")):
            try:
                out.append(CellStatistics.from_dict(json.loads(path.read_text("utf-8"))))
            except (OSError, ValueError, KeyError) as e:
                raise PersistenceError(f"cannot read {path}: {e}") from e
        return out

    def load_table(self) -> pd.DataFrame:
        return self.processor.statistics_table(self.load_statistics())


def run_grid(settings: Settings, logger: Optional[logging.Logger] = None, workers: Optional[int] = None) -> pd.DataFrame:
    """Execute (or resume) the whole grid and return the statistics table."""
    return GridRunner(settings, logger=logger, workers=workers).run()
