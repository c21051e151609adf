"""Desk-scale statistical checks. Each takes from tens of minutes to hours; run with ``-m slow``."""
import pytest

from tools.grid_search import GridRunner
from utils.config import build_settings
from utils.data_processor import KIND_BASELINE, KIND_REFERENCE, KIND_SSL, CellKey

MASTER_SEED = 20240601

pytestmark = pytest.mark.slow


def desk_runner(output_dir):
    settings = build_settings({}, profile="desk", overrides={"master_seed": MASTER_SEED, "output_dir": str(output_dir)})
    return GridRunner(settings)


def test_supervised_accuracy_rises_with_cn0(tmp_path):
    runner = desk_runner(tmp_path / "reference")
    cells = [CellKey(cn0, 200, 200, 0.0, None, KIND_REFERENCE) for cn0 in (37.0, 40.0, 43.0)]
    table = runner.run(cells=cells).sort_values("cn0")
    medians = table["median_max_accuracy"].tolist()
    assert (table["n_runs"] == 31).all()
    assert medians[0] < medians[1] < medians[2]


def _gain_cells():
    return [
        CellKey(37.0, 75, 200, 0.0, None, KIND_BASELINE),
        CellKey(37.0, 75, 200, 1.0, 1.0, KIND_SSL),
    ]


def test_ssl_gain_at_low_cn0_and_determinism(tmp_path):
    first = desk_runner(tmp_path / "a")
    table = first.run(cells=_gain_cells())
    by_kind = table.set_index("kind")["median_max_accuracy"]
    assert by_kind[KIND_SSL] - by_kind[KIND_BASELINE] >= -0.01

    second = desk_runner(tmp_path / "b")
    second.run(cells=_gain_cells())
    for key in _gain_cells():
        runs_a = sorted((first.cell_dir(key) / "runs").glob("run_*.csv"))
        assert len(runs_a) == 31
        for path in runs_a:
            other = second.cell_dir(key) / "runs" / path.name
            assert path.read_bytes() == other.read_bytes()
