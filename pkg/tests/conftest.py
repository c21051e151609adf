import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from tools.gnss_synth import GridSpec, generate_dataset  # noqa: E402
from tools.nn_core import Architecture  # noqa: E402
from utils.config import build_settings  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return GridSpec(height=8, width=8)


@pytest.fixture
def tiny_arch():
    # 8x8 input -> 6x6 -> 4x4 -> pooled 2x2, flatten 3 * 4 = 12
    return Architecture(height=8, width=8, conv1=2, conv2=3, hidden=5)


@pytest.fixture
def small_datasets(small_grid):
    return generate_dataset(small_grid, n_sup=4, cn0_dbhz=40.0, seed=7, n_train=12, n_val=6)


@pytest.fixture
def make_settings(tmp_path):
    """Factory of settings for an 8x8 grid small enough to train in seconds."""

    def _make(output_dir=None, **experiment):
        output_dir = output_dir or tmp_path / "results"
        exp = {
            "cn0_list": [40.0],
            "nsup_list": [4],
            "lambda_grid": [1.0],
            "sigma_grid": [1.0],
            "runs_per_cell": 4,
            "epochs": 2,
            "batch_size": 4,
            "n_train": 12,
            "n_val": 6,
            "master_seed": 2024,
            "output_dir": str(output_dir),
            "workers": 1,
        }
        exp.update(experiment)
        raw = {"experiment": exp, "synthesis": {"height": 8, "width": 8}, "reporting": {"formats": ["csv", "json", "html"]}}
        return build_settings(raw)

    return _make
