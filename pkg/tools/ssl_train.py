"""Graph-transductive semi-supervised training with a kernel-weighted smoothness penalty.

Per mini-batch the objective is

    sum over labelled samples of BCE(y, f(x))
    + lambda * sum over pairs (i < j, not both labelled) of W_ij (f(x_i) - f(x_j))^2

with W_ij = exp(-d_ij^2 / sigma) and d_ij read from a precomputed
DistanceCache. Sums are raw (no division by sample or pair counts).
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from tools.gnss_synth import Dataset
from tools.nn_core import (
    AdamState,
    Architecture,
    ModelParams,
    adam_step,
    backward,
    bce_grad,
    bce_loss,
    forward,
    forward_tape,
    init_params,
    standardize,
)
from tools.ot_metric import DistanceCache
from utils.config import OptimizerConfig
from utils.errors import ConfigurationError, InvalidParameterError
from utils.seeding import stream

INIT_STREAM = 0
SHUFFLE_STREAM = 1
ACCURACY_THRESHOLD = 0.5


@dataclass(frozen=True)
class SSLConfig:
    lam: float = 0.0
    sigma: float = 1.0
    batch_size: int = 50
    epochs: int = 55
    seed: int = 0
    standardize_inputs: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lam > 0 and self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 when lambda > 0")


@dataclass
class PairSet:
    """Within-batch pairs: ``positions`` index the batch, ``indices`` the dataset."""
    positions: np.ndarray
    indices: np.ndarray
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def weighted(self, cache: DistanceCache, sigma: float) -> "PairSet":
        if len(self) == 0:
            return PairSet(self.positions, self.indices, np.zeros(0))
        w = cache.weights(self.indices[:, 0], self.indices[:, 1], sigma)
        return PairSet(self.positions, self.indices, np.asarray(w, dtype=np.float64))


def enumerate_pairs(batch_indices: Sequence[int], labels_present: Sequence[bool]) -> PairSet:
    """All unordered pairs of the batch except labelled-labelled ones, each once."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    lab = np.asarray(labels_present, dtype=bool)
    if idx.shape != lab.shape:
        raise InvalidParameterError("batch_indices and labels_present must align")
    if np.unique(idx).size != idx.size:
        raise InvalidParameterError("batch indices must be distinct")
    a, b = np.triu_indices(idx.size, k=1)
    keep = ~(lab[a] & lab[b])
    a, b = a[keep], b[keep]
    swap = idx[a] > idx[b]
    pos = np.column_stack([np.where(swap, b, a), np.where(swap, a, b)])
    return PairSet(positions=pos, indices=idx[pos] if pos.size else np.zeros((0, 2), dtype=np.int64))


def _require_weights(pairs: PairSet) -> np.ndarray:
    if pairs.weights is None:
        raise InvalidParameterError("pair weights missing; call PairSet.weighted first")
    return pairs.weights


def smoothness_term(pairs: PairSet, predictions: np.ndarray) -> float:
    if len(pairs) == 0:
        return 0.0
    w = _require_weights(pairs)
    f = np.asarray(predictions, dtype=np.float64)
    diff = f[pairs.positions[:, 0]] - f[pairs.positions[:, 1]]
    return float(np.sum(w * diff * diff))


def smoothness_grad(pairs: PairSet, predictions: np.ndarray) -> np.ndarray:
    """d smoothness / d prediction for every batch position."""
    f = np.asarray(predictions, dtype=np.float64)
    grad = np.zeros_like(f)
    if len(pairs) == 0:
        return grad
    w = _require_weights(pairs)
    i, j = pairs.positions[:, 0], pairs.positions[:, 1]
    g = 2.0 * w * (f[i] - f[j])
    np.add.at(grad, i, g)
    np.add.at(grad, j, -g)
    return grad


@dataclass
class Batch:
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    labelled: np.ndarray


@dataclass
class BatchLoss:
    total: float
    supervised: float
    smoothness: float
    n_pairs: int
    grads: Optional[ModelParams] = None


def composite_batch_loss(batch: Batch, params: ModelParams, cfg: SSLConfig,
                         cache: Optional[DistanceCache], with_grad: bool = False) -> BatchLoss:
    tape = forward_tape(batch.x, params)
    p = tape.p
    sup = batch.labelled
    supervised = float(np.sum(bce_loss(p[sup], batch.y[sup]))) if sup.any() else 0.0

    smooth = 0.0
    n_pairs = 0
    pairs: Optional[PairSet] = None
    if cfg.lam > 0:
        if cache is None:
            raise ConfigurationError("a distance cache is required when lambda > 0")
        pairs = enumerate_pairs(batch.indices, batch.labelled).weighted(cache, cfg.sigma)
        smooth = smoothness_term(pairs, p)
        n_pairs = len(pairs)
    total = supervised + cfg.lam * smooth

    grads = None
    if with_grad:
        dp = np.zeros_like(p)
        if sup.any():
            dp[sup] = bce_grad(p[sup], batch.y[sup])
        if pairs is not None:
            dp = dp + cfg.lam * smoothness_grad(pairs, p)
        grads = backward(tape, params, dp)
    return BatchLoss(total=total, supervised=supervised, smoothness=smooth, n_pairs=n_pairs, grads=grads)


@dataclass
class RunResult:
    val_accuracies: List[float]
    max_accuracy: float
    final_train_loss: float
    seed: int
    train_losses: List[float] = field(default_factory=list)
    run_id: str = ""

    def __post_init__(self) -> None:
        if any(not 0.0 <= a <= 1.0 for a in self.val_accuracies):
            raise InvalidParameterError("accuracies must lie in [0, 1]")
        if self.val_accuracies and self.max_accuracy != max(self.val_accuracies):
            raise InvalidParameterError("max_accuracy must equal the maximum of the series")


def run_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(initialization, shuffling) streams of one run."""
    return stream(seed, INIT_STREAM), stream(seed, SHUFFLE_STREAM)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Uniform shuffle of the whole pool, cut into batches; the last one may be short."""
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def validation_accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray, chunk: int = 128) -> float:
    hits = 0
    for k in range(0, x.shape[0], chunk):
        p = forward(x[k:k + chunk], params)
        hits += int(np.sum((np.asarray(p) >= ACCURACY_THRESHOLD).astype(np.int64) == y[k:k + chunk]))
    return hits / x.shape[0]


def prepare_inputs(dataset: Dataset, standardize_inputs: bool) -> np.ndarray:
    x = dataset.images()
    return standardize(x) if standardize_inputs else x


def train_run(train: Dataset, val: Dataset, cfg: SSLConfig, cache: Optional[DistanceCache],
              optimizer: Optional[OptimizerConfig] = None, run_id: str = "",
              on_batch: Optional[Callable[[int, BatchLoss], None]] = None,
              logger: Optional[logging.Logger] = None) -> Tuple[RunResult, ModelParams]:
    """One run: fresh initialization, ``epochs`` shuffled passes, validation after each.

    Returns the run result and the final parameters.
    """
    if val.n_unsup != 0:
        raise ConfigurationError("validation set must be fully labelled")
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if cfg.lam > 0:
        if cache is None:
            raise ConfigurationError("a distance cache is required when lambda > 0")
        if len(cache) != len(train):
            raise ConfigurationError(f"distance cache covers {len(cache)} samples, training set has {len(train)}")
        cached_hash = cache.meta.get("dataset_hash")
        if cached_hash is not None and cached_hash != train.content_hash():
            raise ConfigurationError("distance cache was built for another training set")
    start_ts = time.perf_counter()

    arch = Architecture(height=train.grid.height, width=train.grid.width)
    x_train = prepare_inputs(train, cfg.standardize_inputs)
    y_train = train.labels()
    lab_train = train.labelled_mask()
    x_val = prepare_inputs(val, cfg.standardize_inputs)
    y_val = val.labels()

    init_rng, shuffle_rng = run_streams(cfg.seed)
    params = init_params(arch, init_rng)
    state = AdamState.fresh(params, optimizer)

    accuracies: List[float] = []
    epoch_losses: List[float] = []
    step = 0
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for idx in epoch_batches(len(train), cfg.batch_size, shuffle_rng):
            batch = Batch(indices=idx, x=x_train[idx], y=y_train[idx], labelled=lab_train[idx])
            loss = composite_batch_loss(batch, params, cfg, cache, with_grad=True)
            params, state = adam_step(params, loss.grads, state)  # type: ignore[arg-type]
            if on_batch is not None:
                on_batch(step, loss)
            step += 1
            epoch_loss += loss.total
        epoch_losses.append(epoch_loss)
        accuracies.append(validation_accuracy(params, x_val, y_val))

    result = RunResult(
        val_accuracies=accuracies,
        max_accuracy=max(accuracies),
        final_train_loss=epoch_losses[-1],
        seed=cfg.seed,
        train_losses=epoch_losses,
        run_id=run_id,
    )
    if logger:
        logger.debug(
            "run finished | run_id=%s lambda=%s sigma=%s max_acc=%.4f | duration=%.3fs",
            run_id, cfg.lam, cfg.sigma, result.max_accuracy, time.perf_counter() - start_ts,
        )
    return result, params
