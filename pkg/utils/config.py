import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigurationError

logger = logging.getLogger("ot-ssl-gnss")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthesisConfig(_Section):
    height: int = 26
    width: int = 26
    delay_span: float = 1.5  # chips, half-range over the width axis
    doppler_span: float = 500.0  # Hz, half-range over the height axis
    coherent_integration: float = 1e-3  # seconds
    los_phase: float = 0.0
    amplitude_ratio_range: Tuple[float, float] = (0.2, 0.9)
    delay_offset_range: Tuple[float, float] = (0.0, 1.0)
    doppler_offset_range: Tuple[float, float] = (-125.0, 125.0)

    @field_validator("height", "width")
    @classmethod
    def _min_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("grid dimensions must be >= 2")
        return v

    @field_validator("delay_span", "doppler_span", "coherent_integration")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be strictly positive")
        return v

    @model_validator(mode="after")
    def _ranges(self) -> "SynthesisConfig":
        lo, hi = self.amplitude_ratio_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("amplitude_ratio_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.delay_offset_range
        if not (0 <= lo <= hi):
            raise ValueError("delay_offset_range must satisfy 0 <= lo <= hi")
        lo, hi = self.doppler_offset_range
        if lo > hi:
            raise ValueError("doppler_offset_range must be ordered")
        return self


class SolverConfig(_Section):
    backend: Literal["network", "transport"] = "network"
    max_iterations: int = 1_000_000
    mass_tolerance: float = 1e-9


class ModelConfig(_Section):
    standardize_inputs: bool = False


class OptimizerConfig(_Section):
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class CacheConfig(_Section):
    enabled: bool = True
    dir: str = ".cache"


class ReportingConfig(_Section):
    formats: List[Literal["csv", "json", "html", "excel"]] = Field(default_factory=lambda: ["csv", "json", "html"])


class ExperimentConfig(_Section):
    cn0_list: List[float] = Field(default_factory=lambda: [37.0, 40.0, 43.0])
    nsup_list: List[int] = Field(default_factory=lambda: [25, 40, 50, 60, 75])
    lambda_grid: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    sigma_grid: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 10.0])
    reference_nsup_list: List[int] = Field(default_factory=list)
    runs_per_cell: int = 299
    epochs: int = 55
    batch_size: int = 50
    n_train: int = 200
    n_val: int = 100
    master_seed: Optional[int] = None
    output_dir: str = "./results"
    dataset_per_run: bool = False
    workers: int = 0  # 0 -> os.cpu_count()

    @field_validator("runs_per_cell", "epochs", "batch_size", "n_train", "n_val")
    @classmethod
    def _positive_count(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("counts must be positive")
        return v

    @field_validator("nsup_list", "reference_nsup_list")
    @classmethod
    def _positive_nsup(cls, v: List[int]) -> List[int]:
        if any(n <= 0 for n in v):
            raise ValueError("labelled counts must be positive")
        return v

    @field_validator("lambda_grid")
    @classmethod
    def _lambda_nonnegative(cls, v: List[float]) -> List[float]:
        if any(x < 0 for x in v):
            raise ValueError("lambda values must be >= 0")
        return v

    @field_validator("sigma_grid")
    @classmethod
    def _sigma_positive(cls, v: List[float]) -> List[float]:
        if any(not x > 0 for x in v):
            raise ValueError("sigma values must be > 0")
        return v

    @model_validator(mode="after")
    def _consistency(self) -> "ExperimentConfig":
        too_big = [n for n in self.nsup_list if n > self.n_train]
        if too_big:
            raise ValueError(f"nsup values {too_big} exceed n_train={self.n_train}")
        if any(lam > 0 for lam in self.lambda_grid) and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when lambda > 0")
        return self

    def resolved_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        env = os.getenv("OTSSL_WORKERS")
        if env:
            return max(1, int(env))
        return max(1, os.cpu_count() or 1)


class Settings(_Section):
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    cache: CacheConfig = Field(default_factory=CacheConfig)
    reporting: ReportingConfig = Field(default_factory=ReportingConfig)


PROFILES: Dict[str, Dict[str, Any]] = {
    "full": {},
    "desk": {
        "cn0_list": [37.0, 40.0, 43.0],
        "nsup_list": [75],
        "lambda_grid": [1.0],
        "sigma_grid": [1.0],
        "reference_nsup_list": [200],
        "runs_per_cell": 31,
    },
}

_SECTIONS = set(Settings.model_fields)


def load_config(path: Path) -> Dict[str, Any]:
    """Read a YAML (or JSON) config file; missing file means defaults."""
    if not path.exists():
        logger.warning("Config file not found at %s, using defaults", path)
        return {}
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping at top level")
    return data


def parse_overrides(args: Sequence[str]) -> Dict[str, Any]:
    """Turn ``--key value`` pairs into a {dotted.key: value} mapping."""
    out: Dict[str, Any] = {}
    items = list(args)
    i = 0
    while i < len(items):
        token = items[i]
        if not token.startswith("--"):
            raise ConfigurationError(f"unexpected argument {token!r}, expected --key value")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigurationError(f"missing value for {token}")
            raw = items[i + 1]
            i += 2
        out[key.replace("-", "_")] = yaml.safe_load(raw)
    return out


def apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(raw)
    for key, value in overrides.items():
        if "." in key:
            section, field = key.split(".", 1)
        elif key in ExperimentConfig.model_fields:
            section, field = "experiment", key
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        merged.setdefault(section, {})
        if not isinstance(merged[section], dict):
            raise ConfigurationError(f"config section {section!r} must be a mapping")
        merged[section][field] = value
    return merged


def build_settings(raw: Dict[str, Any], profile: Optional[str] = None,
                   overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """Validate config content; profile values sit between file and CLI overrides."""
    data = copy.deepcopy(raw or {})
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}")
        section = data.setdefault("experiment", {})
        section.update(PROFILES[profile])
    data = apply_overrides(data, overrides or {})
    env_out = os.getenv("OTSSL_OUTPUT_DIR")
    if env_out and "output_dir" not in (overrides or {}):
        data.setdefault("experiment", {}).setdefault("output_dir", env_out)
    try:
        return Settings.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def content_hash(payload: Any) -> str:
    """sha256 over canonical JSON, used to key resumable artifacts."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
