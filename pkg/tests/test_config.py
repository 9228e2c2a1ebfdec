from pathlib import Path

import pytest
import yaml

from dinspoof.config import RunConfig, config_from_dict, dump_config, load_config
from dinspoof.errors import ConfigError


def write(tmp_path, data) -> Path:
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def test_round_trip_defaults(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_paths_resolve_against_config_dir(tmp_path):
    cfg = load_config(write(tmp_path, {"version": 1, "paths": {"train_manifest": "data/m.tsv",
                                                                "stats": "/abs/s.ding"}}))
    assert cfg.path("train_manifest") == tmp_path / "data/m.tsv"
    assert cfg.path("stats") == Path("/abs/s.ding")
    assert cfg.path("scores") is None


@pytest.mark.parametrize("data", [
    {"version": 2},
    {},
    {"version": 1, "extra": 1},
    {"version": 1, "model": {"blocks": [1]}},
    {"version": 1, "train": {"lr": 0.1}},
    {"version": 1, "frontend": {"nfft": 512}},
    {"version": 1, "frontend": {"specaug": {"masks": 3}}},
    {"version": 1, "paths": {"manifest": "x"}},
    {"version": 1, "generator_group_map": {"A01": "speech"}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_nested_values_are_typed():
    cfg = config_from_dict({"version": 1, "frontend": {"n_filters": 64, "specaug": {"enabled": False}},
                            "model": {"block_channels": [8, 8, 8, 8]},
                            "train": {"contrastive": {"tau": 0.05}}})
    assert cfg.frontend.n_filters == 64 and not cfg.frontend.specaug.enabled
    assert cfg.model.block_channels == [8, 8, 8, 8]
    assert cfg.train.contrastive.tau == 0.05


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: [1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
