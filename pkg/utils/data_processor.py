"""Per-cell statistics over run maxima and the grid-level tables built from them."""
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.errors import ReportError, StatisticsError

# numpy name of the linear interpolation between order statistics ("type 7").
QUANTILE_METHOD = "linear"
MIN_RUNS_FOR_QUARTILES = 4

KIND_SSL = "ssl"
KIND_BASELINE = "baseline"
KIND_REFERENCE = "reference"
KINDS = (KIND_SSL, KIND_BASELINE, KIND_REFERENCE)

TABLE_COLUMNS = [
    "cell_id", "kind", "cn0", "n_sup", "n_train", "lam", "sigma",
    "n_runs", "median_max_accuracy", "q1", "q2", "q3",
]


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class CellKey:
    """One grid cell. ``sigma`` is None for the lambda = 0 cells."""
    cn0: float
    n_sup: int
    n_train: int
    lam: float
    sigma: Optional[float]
    kind: str = KIND_SSL

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise StatisticsError(f"unknown cell kind {self.kind!r}")
        if (self.kind == KIND_SSL) != (self.lam > 0):
            raise StatisticsError("only ssl cells carry lambda > 0")

    @property
    def cell_id(self) -> str:
        sigma = "na" if self.sigma is None else _fmt(self.sigma)
        return (f"{self.kind}__cn0_{_fmt(self.cn0)}__nsup_{self.n_sup}__ntrain_{self.n_train}"
                f"__lam_{_fmt(self.lam)}__sigma_{sigma}")

    @property
    def point(self) -> Tuple[float, int, int]:
        return self.cn0, self.n_sup, self.n_train

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _maxima(results: Iterable[Any]) -> np.ndarray:
    values = [float(getattr(r, "max_accuracy", r)) for r in results]
    arr = np.asarray(values, dtype=np.float64)
    if arr.size and (~np.isfinite(arr) | (arr < 0) | (arr > 1)).any():
        raise StatisticsError("run maxima must lie in [0, 1]")
    return arr


def median_max_accuracy(results: Sequence[Any]) -> float:
    """Median of per-run maxima, interpolated like ``quartiles`` so Q2 equals it."""
    arr = _maxima(results)
    if arr.size == 0:
        raise StatisticsError("median of an empty result list")
    return float(np.quantile(arr, 0.5, method=QUANTILE_METHOD))


def quartiles(results: Sequence[Any]) -> Tuple[float, float, float]:
    arr = _maxima(results)
    if arr.size < MIN_RUNS_FOR_QUARTILES:
        raise StatisticsError(f"quartiles need at least {MIN_RUNS_FOR_QUARTILES} runs, got {arr.size}")
    q1, q2, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return float(q1), float(q2), float(q3)


@dataclass
class CellStatistics:
    key: CellKey
    median_max_accuracy: float
    n_runs: int
    q1: Optional[float] = None
    q2: Optional[float] = None
    q3: Optional[float] = None
    maxima: List[float] = field(default_factory=list)

    @classmethod
    def from_results(cls, key: CellKey, results: Sequence[Any]) -> "CellStatistics":
        """Quartiles stay None below the minimum run count; Q2 is the median either way."""
        arr = _maxima(results)
        median = median_max_accuracy(arr)
        q1 = q3 = None
        if arr.size >= MIN_RUNS_FOR_QUARTILES:
            q1, _, q3 = quartiles(arr)
        return cls(key=key, median_max_accuracy=median, n_runs=int(arr.size),
                   q1=q1, q2=median, q3=q3, maxima=[float(a) for a in arr])

    def row(self) -> Dict[str, Any]:
        return {
            "cell_id": self.key.cell_id,
            "kind": self.key.kind,
            "cn0": self.key.cn0,
            "n_sup": self.key.n_sup,
            "n_train": self.key.n_train,
            "lam": self.key.lam,
            "sigma": np.nan if self.key.sigma is None else self.key.sigma,
            "n_runs": self.n_runs,
            "median_max_accuracy": self.median_max_accuracy,
            "q1": np.nan if self.q1 is None else self.q1,
            "q2": self.q2,
            "q3": np.nan if self.q3 is None else self.q3,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": self.key.to_dict(),
            "cell_id": self.key.cell_id,
            "median_max_accuracy": self.median_max_accuracy,
            "quartiles": [self.q1, self.q2, self.q3],
            "n_runs": self.n_runs,
            "maxima": self.maxima,
            "quantile_method": QUANTILE_METHOD,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CellStatistics":
        q1, q2, q3 = data["quartiles"]
        return cls(key=CellKey(**data["key"]), median_max_accuracy=float(data["median_max_accuracy"]),
                   n_runs=int(data["n_runs"]), q1=q1, q2=q2, q3=q3, maxima=list(data.get("maxima", [])))


@dataclass
class BestPair:
    cn0: float
    n_sup: int
    n_train: int
    lam: float
    sigma: float
    median_max_accuracy: float
    baseline_median: float

    @property
    def gain(self) -> float:
        return self.median_max_accuracy - self.baseline_median


class DataProcessor:
    """Table-level views of the per-cell statistics."""

    def statistics_table(self, cells: Sequence[CellStatistics]) -> pd.DataFrame:
        """Deterministically ordered frame, one row per cell."""
        if not cells:
            return pd.DataFrame(columns=TABLE_COLUMNS)
        frame = pd.DataFrame([c.row() for c in cells], columns=TABLE_COLUMNS)
        frame["kind_order"] = frame["kind"].map({k: i for i, k in enumerate(KINDS)})
        frame = frame.sort_values(
            ["kind_order", "cn0", "n_sup", "n_train", "lam", "sigma"], na_position="first", kind="mergesort"
        )
        return frame.drop(columns="kind_order").reset_index(drop=True)

    def baseline_lookup(self, table: pd.DataFrame) -> Dict[Tuple[float, int, int], Any]:
        base = table[table["kind"] == KIND_BASELINE]
        return {(float(r.cn0), int(r.n_sup), int(r.n_train)): r for r in base.itertuples(index=False)}

    def best_pairs(self, table: pd.DataFrame) -> List[BestPair]:
        """Argmax of the median over (lambda, sigma) per operating point, ties all kept."""
        ssl = table[table["kind"] == KIND_SSL]
        baselines = self.baseline_lookup(table)
        out: List[BestPair] = []
        for (cn0, n_sup, n_train), group in ssl.groupby(["cn0", "n_sup", "n_train"], sort=True):
            point = (float(cn0), int(n_sup), int(n_train))
            if point not in baselines:
                raise ReportError(f"missing lambda = 0 baseline for cn0={cn0:g} n_sup={n_sup} n_train={n_train}")
            base = float(baselines[point].median_max_accuracy)
            best = group["median_max_accuracy"].max()
            winners = group[group["median_max_accuracy"] == best].sort_values(["lam", "sigma"], kind="mergesort")
            for r in winners.itertuples(index=False):
                out.append(BestPair(cn0=point[0], n_sup=point[1], n_train=point[2], lam=float(r.lam),
                                    sigma=float(r.sigma), median_max_accuracy=float(best), baseline_median=base))
        return out

    def sigma_breakdown(self, table: pd.DataFrame, pair: BestPair) -> pd.DataFrame:
        """Quartiles over sigma at the winning lambda of an operating point."""
        mask = (
            (table["kind"] == KIND_SSL) & (table["cn0"] == pair.cn0) & (table["n_sup"] == pair.n_sup)
            & (table["n_train"] == pair.n_train) & (table["lam"] == pair.lam)
        )
        return table[mask].sort_values("sigma", kind="mergesort")[["sigma", "q1", "q2", "q3", "median_max_accuracy", "n_runs"]]

    def gain_distribution(self, pairs: Sequence[BestPair]) -> List[Dict[str, int]]:
        """Number of operating points per best gain, rounded to whole percent."""
        seen: Dict[Tuple[float, int, int], float] = {}
        for p in pairs:
            seen.setdefault((p.cn0, p.n_sup, p.n_train), p.gain)
        counts = Counter(int(math.floor(g * 100 + 0.5)) for g in seen.values())
        return [{"gain_percent": k, "points": counts[k]} for k in sorted(counts)]

    def accuracy_vs_nsup(self, table: pd.DataFrame) -> pd.DataFrame:
        """Curves per C/N0: lambda = 0 baseline, fully supervised reference and best SSL cell(s)."""
        cols = ["cn0", "series", "n_sup", "n_train", "lam", "sigma", "median_max_accuracy", "q1", "q3", "n_runs"]
        rows: List[Dict[str, Any]] = []
        for kind in (KIND_BASELINE, KIND_REFERENCE):
            for r in table[table["kind"] == kind].itertuples(index=False):
                rows.append({"cn0": r.cn0, "series": kind, "n_sup": r.n_sup, "n_train": r.n_train, "lam": r.lam,
                             "sigma": r.sigma, "median_max_accuracy": r.median_max_accuracy, "q1": r.q1,
                             "q3": r.q3, "n_runs": r.n_runs})
        ssl = table[table["kind"] == KIND_SSL]
        for _, group in ssl.groupby(["cn0", "n_sup", "n_train"], sort=True):
            best = group[group["median_max_accuracy"] == group["median_max_accuracy"].max()]
            for r in best.itertuples(index=False):
                rows.append({"cn0": r.cn0, "series": "best_ssl", "n_sup": r.n_sup, "n_train": r.n_train,
                             "lam": r.lam, "sigma": r.sigma, "median_max_accuracy": r.median_max_accuracy,
                             "q1": r.q1, "q3": r.q3, "n_runs": r.n_runs})
        frame = pd.DataFrame(rows, columns=cols)
        return frame.sort_values(["cn0", "series", "n_sup", "n_train", "lam", "sigma"], kind="mergesort").reset_index(drop=True)

    def quartiles_vs_sigma(self, table: pd.DataFrame) -> pd.DataFrame:
        """SSL quartiles per (cn0, n_sup, lambda) along sigma, with the matching baseline quartiles."""
        cols = ["cn0", "n_sup", "n_train", "lam", "sigma", "q1", "q2", "q3", "n_runs",
                "baseline_q1", "baseline_q2", "baseline_q3"]
        baselines = self.baseline_lookup(table)
        rows: List[Dict[str, Any]] = []
        for r in table[table["kind"] == KIND_SSL].itertuples(index=False):
            base = baselines.get((float(r.cn0), int(r.n_sup), int(r.n_train)))
            rows.append({
                "cn0": r.cn0, "n_sup": r.n_sup, "n_train": r.n_train, "lam": r.lam, "sigma": r.sigma,
                "q1": r.q1, "q2": r.q2, "q3": r.q3, "n_runs": r.n_runs,
                "baseline_q1": np.nan if base is None else base.q1,
                "baseline_q2": np.nan if base is None else base.q2,
                "baseline_q3": np.nan if base is None else base.q3,
            })
        frame = pd.DataFrame(rows, columns=cols)
        return frame.sort_values(["cn0", "n_sup", "n_train", "lam", "sigma"], kind="mergesort").reset_index(drop=True)

