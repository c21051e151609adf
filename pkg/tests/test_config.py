import json

import pytest

from utils.config import (
    ExperimentConfig,
    apply_overrides,
    build_settings,
    content_hash,
    load_config,
    parse_overrides,
)
from utils.errors import ConfigurationError


def test_defaults_match_the_full_grid():
    s = build_settings({})
    assert s.experiment.runs_per_cell == 299
    assert s.experiment.epochs == 55 and s.experiment.batch_size == 50
    assert s.experiment.n_train == 200 and s.experiment.n_val == 100
    assert s.synthesis.height == s.synthesis.width == 26
    assert s.optimizer.learning_rate == 1e-3
    assert s.solver.backend == "network"


def test_parse_overrides():
    got = parse_overrides(["--epochs", "3", "--lambda-grid", "[1, 10]", "--solver.backend=transport"])
    assert got == {"epochs": 3, "lambda_grid": [1, 10], "solver.backend": "transport"}
    with pytest.raises(ConfigurationError):
        parse_overrides(["epochs", "3"])
    with pytest.raises(ConfigurationError):
        parse_overrides(["--epochs"])


def test_apply_overrides_routes_keys():
    merged = apply_overrides({"experiment": {"epochs": 5}}, {"epochs": 7, "optimizer.learning_rate": 0.01})
    assert merged == {"experiment": {"epochs": 7}, "optimizer": {"learning_rate": 0.01}}
    with pytest.raises(ConfigurationError):
        apply_overrides({}, {"no_such_key": 1})
    with pytest.raises(ConfigurationError):
        apply_overrides({}, {"nowhere.key": 1})


def test_profile_sits_between_file_and_overrides():
    s = build_settings({"experiment": {"runs_per_cell": 5}}, profile="desk", overrides={"runs_per_cell": 3})
    assert s.experiment.runs_per_cell == 3
    assert s.experiment.nsup_list == [75]
    assert s.experiment.reference_nsup_list == [200]
    with pytest.raises(ConfigurationError):
        build_settings({}, profile="nope")


@pytest.mark.parametrize("overrides", [
    {"nsup_list": [250]},
    {"sigma_grid": [0.0]},
    {"lambda_grid": [-1]},
    {"epochs": 0},
    {"batch_size": 1},
    {"solver.backend": "sinkhorn"},
    {"synthesis.amplitude_ratio_range": [0.5, 1.5]},
    {"synthesis.unknown": 1},
])
def test_invalid_values_are_configuration_errors(overrides):
    with pytest.raises(ConfigurationError):
        build_settings({}, overrides=overrides)


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("OTSSL_OUTPUT_DIR", "/tmp/elsewhere")
    assert build_settings({}).experiment.output_dir == "/tmp/elsewhere"
    assert build_settings({"experiment": {"output_dir": "mine"}}).experiment.output_dir == "mine"
    assert build_settings({}, overrides={"output_dir": "cli"}).experiment.output_dir == "cli"


def test_worker_resolution(monkeypatch):
    monkeypatch.setenv("OTSSL_WORKERS", "3")
    assert ExperimentConfig(workers=2).resolved_workers() == 2
    assert ExperimentConfig().resolved_workers() == 3
    monkeypatch.delenv("OTSSL_WORKERS")
    assert ExperimentConfig().resolved_workers() >= 1


def test_load_config_files(tmp_path):
    assert load_config(tmp_path / "missing.yaml") == {}
    path = tmp_path / "c.yaml"
    path.write_text("experiment:\n  epochs: 4\n", encoding="utf-8")
    assert load_config(path) == {"experiment": {"epochs": 4}}
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"solver": {"backend": "transport"}}), encoding="utf-8")
    assert build_settings(load_config(js)).solver.backend == "transport"
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(bad)


def test_content_hash_is_key_order_independent():
    assert content_hash({"a": 1, "b": [1, 2]}) == content_hash({"b": [1, 2], "a": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})
