"""Synthetic I/Q correlator images: LOS + optional multipath echo + AWGN.

The correlation kernel is the separable product of the C/A code triangle
autocorrelation along delay and the coherent-integration sinc along Doppler.
Rows index Doppler, columns index code delay.
"""
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from utils.config import SynthesisConfig
from utils.errors import ConfigurationError, InvalidParameterError, PersistenceError, ShapeError
from utils.seeding import GENERATOR_NAME, LABELS_KEY, TRAIN_STREAM, VAL_STREAM, sample_stream, stream

GENERATOR_VERSION = "gnss-synth/2"
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GridSpec:
    height: int = 26
    width: int = 26
    delay_span: float = 1.5
    doppler_span: float = 500.0

    def __post_init__(self) -> None:
        if self.height < 2 or self.width < 2:
            raise ConfigurationError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if not (self.delay_span > 0 and self.doppler_span > 0):
            raise ConfigurationError("grid spans must be strictly positive")

    @classmethod
    def from_config(cls, cfg: SynthesisConfig) -> "GridSpec":
        return cls(cfg.height, cfg.width, cfg.delay_span, cfg.doppler_span)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @staticmethod
    def _centred_axis(span: float, n: int) -> np.ndarray:
        # cell n // 2 sits exactly on 0, steps of 2 * span / n
        return (np.arange(n) - n // 2) * (2.0 * span / n)

    def delay_axis(self) -> np.ndarray:
        return self._centred_axis(self.delay_span, self.width)

    def doppler_axis(self) -> np.ndarray:
        return self._centred_axis(self.doppler_span, self.height)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "height": self.height,
            "width": self.width,
            "delay_span": self.delay_span,
            "doppler_span": self.doppler_span,
        }


@dataclass(frozen=True)
class MultipathParams:
    amplitude_ratio: float
    delay_offset: float
    doppler_offset: float
    phase_offset: float

    def __post_init__(self) -> None:
        values = (self.amplitude_ratio, self.delay_offset, self.doppler_offset, self.phase_offset)
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError(f"multipath parameters must be finite: {values}")
        if not 0.0 < self.amplitude_ratio <= 1.0:
            raise InvalidParameterError(f"amplitude_ratio must be in (0, 1], got {self.amplitude_ratio}")
        if self.delay_offset < 0:
            raise InvalidParameterError(f"delay_offset must be >= 0, got {self.delay_offset}")
        wrapped = math.fmod(self.phase_offset, TWO_PI)
        if wrapped < 0:
            wrapped += TWO_PI
        if wrapped >= TWO_PI:
            wrapped = 0.0
        object.__setattr__(self, "phase_offset", wrapped)


@dataclass
class IQPair:
    i_channel: np.ndarray
    q_channel: np.ndarray

    def __post_init__(self) -> None:
        self.i_channel = np.asarray(self.i_channel, dtype=np.float64)
        self.q_channel = np.asarray(self.q_channel, dtype=np.float64)
        if self.i_channel.ndim != 2 or self.i_channel.shape != self.q_channel.shape:
            raise ShapeError(f"I/Q channels must be equal 2-D shapes, got {self.i_channel.shape} and {self.q_channel.shape}")
        if not (np.all(np.isfinite(self.i_channel)) and np.all(np.isfinite(self.q_channel))):
            raise InvalidParameterError("I/Q channels must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.i_channel.shape  # type: ignore[return-value]

    def stack(self) -> np.ndarray:
        return np.stack([self.i_channel, self.q_channel])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "IQPair":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ShapeError(f"expected a 2xHxW array, got {arr.shape}")
        return cls(arr[0].copy(), arr[1].copy())

    def __add__(self, other: "IQPair") -> "IQPair":
        return IQPair(self.i_channel + other.i_channel, self.q_channel + other.q_channel)


@dataclass
class LabelledSample:
    image: IQPair
    label: int
    is_labelled: bool = True

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise InvalidParameterError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    samples: List[LabelledSample]
    n_sup: int
    n_unsup: int
    seed: int
    grid: GridSpec = field(default_factory=GridSpec)
    cn0_dbhz: float = math.inf
    kind: str = "train"
    synthesis: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_sup + self.n_unsup != len(self.samples):
            raise ConfigurationError(
                f"n_sup + n_unsup = {self.n_sup + self.n_unsup} but dataset holds {len(self.samples)} samples"
            )
        flags = [s.is_labelled for s in self.samples]
        if flags != [True] * self.n_sup + [False] * self.n_unsup:
            raise ConfigurationError("labelled samples must come first")

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        """All samples as an (N, 2, H, W) float64 array."""
        h, w = self.grid.shape
        if not self.samples:
            return np.zeros((0, 2, h, w))
        return np.stack([s.image.stack() for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def labelled_mask(self) -> np.ndarray:
        return np.array([s.is_labelled for s in self.samples], dtype=bool)

    def _data_bytes(self) -> bytes:
        return self.images().astype("<f4").tobytes()

    def _labels_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "index": np.arange(len(self.samples)),
            "label": self.labels(),
            "is_labelled": self.labelled_mask().astype(int),
        })

    def meta(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "grid": self.grid.to_dict(),
            "n_sup": self.n_sup,
            "n_unsup": self.n_unsup,
            "seed": self.seed,
            "cn0_dbhz": self.cn0_dbhz,
            "synthesis": self.synthesis,
            "generator_version": GENERATOR_VERSION,
            "random_source": GENERATOR_NAME,
        }

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self._data_bytes())
        h.update(self._labels_frame().to_csv(index=False, lineterminator="\n").encode("utf-8"))
        h.update(json.dumps(self.meta(), sort_keys=True).encode("utf-8"))
        return h.hexdigest()

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "data.f32").write_bytes(self._data_bytes())
            self._labels_frame().to_csv(directory / "labels.csv", index=False, lineterminator="\n")
            meta = dict(self.meta(), content_hash=self.content_hash())
            (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write dataset to {directory}: {e}") from e
        return directory

    @classmethod
    def load(cls, directory: Path) -> "Dataset":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text("utf-8"))
            raw = np.fromfile(directory / "data.f32", dtype="<f4")
            frame = pd.read_csv(directory / "labels.csv")
        except (OSError, ValueError) as e:
            raise PersistenceError(f"cannot read dataset from {directory}: {e}") from e
        grid = GridSpec(**meta["grid"])
        n = len(frame)
        if raw.size != n * 2 * grid.n_pixels:
            raise PersistenceError(f"data.f32 in {directory} holds {raw.size} values, expected {n * 2 * grid.n_pixels}")
        images = raw.astype(np.float64).reshape(n, 2, grid.height, grid.width)
        samples = [
            LabelledSample(IQPair(images[k, 0], images[k, 1]), int(frame["label"][k]), bool(frame["is_labelled"][k]))
            for k in range(n)
        ]
        return cls(
            samples=samples,
            n_sup=int(meta["n_sup"]),
            n_unsup=int(meta["n_unsup"]),
            seed=int(meta["seed"]),
            grid=grid,
            cn0_dbhz=float(meta["cn0_dbhz"]),
            kind=str(meta.get("kind", "train")),
            synthesis=dict(meta.get("synthesis") or {}),
        )


def correlation_kernel(grid: GridSpec, delay: float, doppler: float,
                       coherent_integration: float = 1e-3) -> np.ndarray:
    """Separable correlator response K(tau - delay, f - doppler) on the grid."""
    tau = grid.delay_axis() - delay
    freq = grid.doppler_axis() - doppler
    triangle = np.maximum(0.0, 1.0 - np.abs(tau))
    # np.sinc is the normalised sinc sin(pi x) / (pi x)
    attenuation = np.sinc(freq * coherent_integration)
    return attenuation[:, None] * triangle[None, :]


def render_component(grid: GridSpec, amplitude: float, delay: float, doppler: float, phase: float,
                     coherent_integration: float = 1e-3) -> IQPair:
    for name, value in (("amplitude", amplitude), ("delay", delay), ("doppler", doppler), ("phase", phase)):
        if not math.isfinite(value):
            raise InvalidParameterError(f"{name} must be finite, got {value}")
    if amplitude < 0:
        raise InvalidParameterError(f"amplitude must be >= 0, got {amplitude}")
    envelope = amplitude * correlation_kernel(grid, delay, doppler, coherent_integration)
    return IQPair(envelope * math.cos(phase), envelope * math.sin(phase))


def noise_sigma(cn0_dbhz: float, coherent_integration: float = 1e-3) -> float:
    """Per-channel noise standard deviation for a unit-amplitude LOS peak."""
    if math.isnan(cn0_dbhz) or cn0_dbhz == -math.inf:
        raise InvalidParameterError(f"C/N0 must be finite or +inf, got {cn0_dbhz}")
    if cn0_dbhz == math.inf:
        return 0.0
    return 1.0 / math.sqrt(2.0 * 10.0 ** (cn0_dbhz / 10.0) * coherent_integration)


def add_noise(image: IQPair, cn0_dbhz: float, rng: np.random.Generator,
              coherent_integration: float = 1e-3) -> IQPair:
    sigma = noise_sigma(cn0_dbhz, coherent_integration)
    if sigma == 0.0:
        return IQPair(image.i_channel.copy(), image.q_channel.copy())
    noise = rng.standard_normal((2,) + image.shape) * sigma
    return IQPair(image.i_channel + noise[0], image.q_channel + noise[1])


def draw_multipath(rng: np.random.Generator, cfg: Optional[SynthesisConfig] = None) -> MultipathParams:
    cfg = cfg or SynthesisConfig()
    amp = rng.uniform(*cfg.amplitude_ratio_range)
    delay = rng.uniform(*cfg.delay_offset_range)
    doppler = rng.uniform(*cfg.doppler_offset_range)
    phase = rng.uniform(0.0, TWO_PI)
    return MultipathParams(float(amp), float(delay), float(doppler), float(phase))


def los_template(grid: GridSpec, cfg: Optional[SynthesisConfig] = None) -> IQPair:
    cfg = cfg or SynthesisConfig()
    return render_component(grid, 1.0, 0.0, 0.0, cfg.los_phase, cfg.coherent_integration)


def generate_sample(grid: GridSpec, contaminated: bool, cn0_dbhz: float, rng: np.random.Generator,
                    synthesis: Optional[SynthesisConfig] = None,
                    multipath: Optional[MultipathParams] = None) -> LabelledSample:
    """One labelled sample. Echo parameters are drawn before the noise."""
    cfg = synthesis or SynthesisConfig()
    image = los_template(grid, cfg)
    if contaminated:
        echo = multipath or draw_multipath(rng, cfg)
        image = image + render_component(
            grid,
            echo.amplitude_ratio,
            echo.delay_offset,
            echo.doppler_offset,
            cfg.los_phase + echo.phase_offset,
            cfg.coherent_integration,
        )
    image = add_noise(image, cn0_dbhz, rng, cfg.coherent_integration)
    return LabelledSample(image=image, label=int(bool(contaminated)), is_labelled=True)


def balanced_labels(n_sup: int, n_total: int) -> Tuple[np.ndarray, np.ndarray]:
    """Class vectors for the labelled and unlabelled subsets.

    Each subset differs by at most one between classes and so does the union.
    """
    sup_ones = n_sup // 2
    unsup_ones = n_total // 2 - sup_ones
    n_unsup = n_total - n_sup
    sup = np.array([1] * sup_ones + [0] * (n_sup - sup_ones), dtype=np.int64)
    unsup = np.array([1] * unsup_ones + [0] * (n_unsup - unsup_ones), dtype=np.int64)
    return sup, unsup


def _quantize(sample: LabelledSample) -> LabelledSample:
    # float32-representable values make the data.f32 round trip exact
    arr = sample.image.stack().astype(np.float32).astype(np.float64)
    return LabelledSample(IQPair(arr[0], arr[1]), sample.label, sample.is_labelled)


def _build_split(grid: GridSpec, labels: np.ndarray, n_sup: int, cn0_dbhz: float, seed: int,
                 stream_id: int, cfg: SynthesisConfig, kind: str) -> Dataset:
    samples: List[LabelledSample] = []
    for index, label in enumerate(labels):
        rng = sample_stream(seed, stream_id, index)
        s = generate_sample(grid, bool(label), cn0_dbhz, rng, cfg)
        s.is_labelled = index < n_sup
        samples.append(_quantize(s))
    return Dataset(
        samples=samples,
        n_sup=n_sup,
        n_unsup=len(labels) - n_sup,
        seed=seed,
        grid=grid,
        cn0_dbhz=cn0_dbhz,
        kind=kind,
        synthesis=cfg.model_dump(mode="json"),
    )


def generate_dataset(grid: GridSpec, n_sup: int, cn0_dbhz: float, seed: int, n_train: int = 200,
                     n_val: int = 100, synthesis: Optional[SynthesisConfig] = None,
                     logger: Optional[logging.Logger] = None) -> Tuple[Dataset, Dataset]:
    """Training set (labelled first, then unlabelled) and a fully labelled validation set.

    Sample k of a split draws only from the stream (seed, split, k), so any
    subset of samples can be regenerated independently.
    """
    if n_sup < 0 or n_train <= 0 or n_val <= 0:
        raise ConfigurationError("dataset sizes must be positive")
    if n_sup > n_train:
        raise ConfigurationError(f"n_sup={n_sup} exceeds n_train={n_train}")
    cfg = synthesis or SynthesisConfig()
    start_ts = time.perf_counter()

    sup, unsup = balanced_labels(n_sup, n_train)
    label_rng = stream(seed, TRAIN_STREAM, LABELS_KEY)
    train_labels = np.concatenate([label_rng.permutation(sup), label_rng.permutation(unsup)])
    val_labels = stream(seed, VAL_STREAM, LABELS_KEY).permutation(balanced_labels(n_val, n_val)[0])

    train = _build_split(grid, train_labels, n_sup, cn0_dbhz, seed, TRAIN_STREAM, cfg, "train")
    val = _build_split(grid, val_labels, n_val, cn0_dbhz, seed, VAL_STREAM, cfg, "val")
    if logger:
        logger.info(
            "dataset generated | cn0=%s n_train=%s n_sup=%s n_val=%s seed=%s | duration=%.3fs",
            cn0_dbhz, n_train, n_sup, n_val, seed, time.perf_counter() - start_ts,
        )
    return train, val
