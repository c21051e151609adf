"""Exact Wasserstein-1 distances between I/Q images on the pixel grid.

Images become histograms by a min-offset and a unit-sum scaling; the ground
cost is the Euclidean distance between pixel indices. A pair of I/Q images
is compared channel by channel and the two transport costs are summed.
"""
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import ot
from scipy.spatial.distance import cdist

from tools.gnss_synth import Dataset, GridSpec, IQPair
from tools.transport_simplex import SOLVER_VERSION as TRANSPORT_VERSION, solve_transport
from utils.config import SolverConfig
from utils.errors import (
    ConfigurationError,
    DegenerateInputError,
    InfeasibleError,
    InvalidParameterError,
    NumericalError,
    PersistenceError,
    ShapeError,
)

BACKENDS = ("network", "transport")
HISTOGRAM_TOL = 1e-9


def solver_version(backend: str) -> str:
    if backend == "network":
        return f"pot-{ot.__version__}/network-simplex"
    if backend == "transport":
        return TRANSPORT_VERSION
    raise ConfigurationError(f"unknown EMD backend {backend!r}; choose one of {BACKENDS}")


def flatten_index(row: int, col: int, n: int) -> int:
    """1-based pixel (row, col) on an n-wide grid -> 1-based linear index."""
    if not (1 <= row <= n and 1 <= col <= n):
        raise IndexError(f"pixel ({row}, {col}) outside a {n}x{n} grid")
    return col + (row - 1) * n


@dataclass(frozen=True)
class CostMatrix:
    grid: GridSpec
    entries: np.ndarray = field(repr=False, compare=False)

    @property
    def n_pixels(self) -> int:
        return self.entries.shape[0]


@lru_cache(maxsize=8)
def build_cost_matrix(grid: GridSpec) -> CostMatrix:
    """Pixel-to-pixel Euclidean distances, rows/columns in flatten order.

    Cached per grid: callers share the returned matrix and must not mutate it.
    """
    rows, cols = np.meshgrid(np.arange(grid.height), np.arange(grid.width), indexing="ij")
    coords = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    entries = cdist(coords, coords, metric="euclidean")
    return CostMatrix(grid=grid, entries=entries)


@dataclass
class Histogram:
    mass: np.ndarray

    def __post_init__(self) -> None:
        self.mass = np.asarray(self.mass, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.mass)) or (self.mass < 0).any():
            raise InvalidParameterError("histogram entries must be finite and non-negative")
        total = float(self.mass.sum())
        if abs(total - 1.0) > HISTOGRAM_TOL:
            raise InvalidParameterError(f"histogram must sum to 1, got {total!r}")

    def __len__(self) -> int:
        return self.mass.size


@dataclass
class TransportPlan:
    flow: np.ndarray
    cost: float
    backend: str = "network"
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def marginal_error(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(max(np.abs(self.flow.sum(axis=1) - a).max(), np.abs(self.flow.sum(axis=0) - b).max()))


def normalize_image(channel: np.ndarray) -> Histogram:
    channel = np.asarray(channel, dtype=np.float64)
    if not np.all(np.isfinite(channel)):
        raise InvalidParameterError("channel must be finite")
    shifted = channel - channel.min()
    total = float(shifted.sum())
    if total <= 0.0:
        raise DegenerateInputError("constant channel has no mass after the min-offset")
    return Histogram(shifted.ravel() / total)


def _as_mass(h: Union[Histogram, np.ndarray]) -> np.ndarray:
    return h.mass if isinstance(h, Histogram) else np.asarray(h, dtype=np.float64).ravel()


def emd(a: Union[Histogram, np.ndarray], b: Union[Histogram, np.ndarray], c: CostMatrix,
        backend: str = "network", max_iterations: int = 1_000_000,
        mass_tolerance: float = 1e-9) -> TransportPlan:
    """Optimal transport plan from ``a`` to ``b`` under ground cost ``c``."""
    a_mass = _as_mass(a)
    b_mass = _as_mass(b)
    m = c.entries
    if a_mass.size != m.shape[0] or b_mass.size != m.shape[1]:
        raise ShapeError(f"histograms of size {a_mass.size}/{b_mass.size} do not match cost {m.shape}")
    if (a_mass < 0).any() or (b_mass < 0).any():
        raise InvalidParameterError("histograms must be non-negative")
    sa, sb = float(a_mass.sum()), float(b_mass.sum())
    if abs(sa - sb) > mass_tolerance:
        raise InfeasibleError(f"marginal masses differ: {sa!r} vs {sb!r}")
    if sa != sb:
        b_mass = b_mass * (sa / sb)

    if backend == "network":
        flow, log = ot.emd(a_mass, b_mass, m, numItermax=max_iterations, log=True)
        if log.get("warning"):
            raise NumericalError(f"network simplex did not converge: {log['warning']}")
        return TransportPlan(flow=flow, cost=float(np.sum(flow * m)), backend=backend,
                             u=np.asarray(log["u"]), v=np.asarray(log["v"]))
    if backend == "transport":
        res = solve_transport(a_mass, b_mass, m, max_iterations=max_iterations)
        return TransportPlan(flow=res.flow, cost=res.cost, backend=backend, u=res.u, v=res.v)
    raise ConfigurationError(f"unknown EMD backend {backend!r}; choose one of {BACKENDS}")


def image_histograms(x: Union[IQPair, np.ndarray]) -> Tuple[Histogram, Histogram]:
    arr = x.stack() if isinstance(x, IQPair) else np.asarray(x)
    return normalize_image(arr[0]), normalize_image(arr[1])


def pair_distance(x: Union[IQPair, np.ndarray], x2: Union[IQPair, np.ndarray], c: CostMatrix,
                  backend: str = "network", **solver_kwargs: Any) -> float:
    xi, xq = image_histograms(x)
    yi, yq = image_histograms(x2)
    if xi.mass.size != c.n_pixels or yi.mass.size != c.n_pixels:
        raise ShapeError("images do not match the cost matrix grid")
    return emd(xi, yi, c, backend, **solver_kwargs).cost + emd(xq, yq, c, backend, **solver_kwargs).cost


def kernel_weight(d: Union[float, np.ndarray], sigma: float) -> Union[float, np.ndarray]:
    """Gaussian similarity exp(-d^2 / sigma); underflows to 0.0 for d^2/sigma > ~745."""
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    d_arr = np.asarray(d, dtype=np.float64)
    if (d_arr < 0).any():
        raise InvalidParameterError("distances must be >= 0")
    w = np.exp(-np.square(d_arr) / sigma)
    return float(w) if w.ndim == 0 else w


@dataclass
class DistanceCache:
    d: np.ndarray
    computed: np.ndarray = None  # type: ignore[assignment]
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.d = np.asarray(self.d, dtype=np.float64)
        n = self.d.shape[0]
        if self.d.shape != (n, n):
            raise ShapeError(f"distance matrix must be square, got {self.d.shape}")
        if self.computed is None:
            self.computed = np.ones((n, n), dtype=bool)
        if (np.diag(self.d) != 0).any() or not np.array_equal(self.d, self.d.T) or (self.d < 0).any():
            raise NumericalError("distance matrix must be symmetric, non-negative, zero on the diagonal")

    def __len__(self) -> int:
        return self.d.shape[0]

    def weights(self, i: np.ndarray, j: np.ndarray, sigma: float) -> np.ndarray:
        if not self.computed[i, j].all():
            raise NumericalError("requested distances that were never computed")
        return np.asarray(kernel_weight(self.d[i, j], sigma))

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        iu = np.triu_indices(len(self), k=1)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "distances.f64").write_bytes(self.d[iu].astype("<f8").tobytes())
            meta = dict(self.meta, n=len(self))
            (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write distance cache to {directory}: {e}") from e
        return directory

    @classmethod
    def load(cls, directory: Path, expected_hash: Optional[str] = None) -> "DistanceCache":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text("utf-8"))
            upper = np.fromfile(directory / "distances.f64", dtype="<f8")
            n = int(meta["n"])
            dataset_hash = meta.get("dataset_hash")
        except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
            raise PersistenceError(f"cannot read distance cache from {directory}: {e!r}") from e
        if expected_hash is not None and dataset_hash != expected_hash:
            raise PersistenceError(f"distance cache in {directory} belongs to another dataset")
        if upper.size != n * (n - 1) // 2:
            raise PersistenceError(f"distances.f64 in {directory} has {upper.size} entries, expected {n * (n - 1) // 2}")
        d = np.zeros((n, n))
        iu = np.triu_indices(n, k=1)
        d[iu] = upper
        d[(iu[1], iu[0])] = upper
        return cls(d=d, meta=meta)


# Worker-process state for parallel cache construction.
_WORKER: Dict[str, Any] = {}


def _init_worker(hists: np.ndarray, cost: CostMatrix, backend: str, max_iterations: int, tol: float) -> None:
    _WORKER.update(hists=hists, cost=cost, backend=backend, max_iterations=max_iterations, tol=tol)


def _row_distances(i: int) -> Tuple[int, np.ndarray]:
    hists = _WORKER["hists"]
    c = _WORKER["cost"]
    kwargs = {"backend": _WORKER["backend"], "max_iterations": _WORKER["max_iterations"], "mass_tolerance": _WORKER["tol"]}
    n = hists.shape[0]
    out = np.zeros(n - i - 1)
    for k, j in enumerate(range(i + 1, n)):
        out[k] = emd(hists[i, 0], hists[j, 0], c, **kwargs).cost + emd(hists[i, 1], hists[j, 1], c, **kwargs).cost
    return i, out


def build_distance_cache(dataset: Union[Dataset, Sequence[IQPair]], c: CostMatrix,
                         solver: Optional[SolverConfig] = None, workers: int = 1,
                         logger: Optional[logging.Logger] = None) -> DistanceCache:
    """All pairwise sample distances of a dataset (each unordered pair solved once)."""
    solver = solver or SolverConfig()
    images = dataset.images() if isinstance(dataset, Dataset) else np.stack([x.stack() for x in dataset])
    n = images.shape[0]
    if n == 0:
        raise ConfigurationError("cannot build a distance cache for an empty dataset")
    start_ts = time.perf_counter()
    hists = np.stack([
        np.stack([normalize_image(images[k, ch]).mass for ch in (0, 1)]) for k in range(n)
    ])
    if hists.shape[-1] != c.n_pixels:
        raise ShapeError("dataset grid does not match the cost matrix")

    d = np.zeros((n, n))
    init_args = (hists, c, solver.backend, solver.max_iterations, solver.mass_tolerance)
    rows = range(n - 1)
    if workers <= 1 or n < 3:
        _init_worker(*init_args)
        results = map(_row_distances, rows)
        for i, out in results:
            d[i, i + 1:] = out
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=init_args) as pool:
            for i, out in pool.map(_row_distances, rows, chunksize=max(1, n // (8 * workers))):
                d[i, i + 1:] = out
    d = d + d.T

    meta: Dict[str, Any] = {
        "solver": {"backend": solver.backend, "version": solver_version(solver.backend)},
        "grid": c.grid.to_dict(),
    }
    if isinstance(dataset, Dataset):
        meta["dataset_hash"] = dataset.content_hash()
    if logger:
        logger.info(
            "distance cache built | samples=%s pairs=%s backend=%s workers=%s | duration=%.3fs",
            n, n * (n - 1) // 2, solver.backend, workers, time.perf_counter() - start_ts,
        )
    return DistanceCache(d=d, meta=meta)
