import json

import pytest

from softrank import config
from softrank.config import ConfigError


def test_defaults_resolve():
    cfg = config.resolve({})
    assert cfg["train.gamma"] == 0.01 and cfg["train.variant"] == "adaptive"
    assert cfg["sweep.cr_list"] == [0.25, 0.5, 0.75]


def test_parse_text_types_and_comments():
    cfg = config.parse_text("# comment\nseed = 3\ntrain.cr = 0.25  # inline\nbaseline.static = true\nsweep.cr_list = 0.1, 0.2\n")
    assert cfg["seed"] == 3 and cfg["train.cr"] == 0.25 and cfg["baseline.static"] is True
    assert cfg["sweep.cr_list"] == [0.1, 0.2]


def test_unknown_keys_listed_by_name():
    with pytest.raises(ConfigError, match="train.gama, zzz"):
        config.parse_text("train.gama = 1\nzzz = 2\n")


def test_bad_lines_and_values():
    with pytest.raises(ConfigError):
        config.parse_text("seed 3\n")
    with pytest.raises(ConfigError):
        config.parse_text("seed = three\n")
    with pytest.raises(ConfigError):
        config.parse_text("a.b.c = 1\n")


def test_dumps_round_trip_and_run_id():
    cfg = config.resolve({"seed": 4, "train.cr": 0.75})
    assert config.parse_text(config.dumps(cfg)) == cfg
    assert config.run_id(cfg) == config.run_id(dict(cfg))
    assert config.run_id(cfg) != config.run_id(dict(cfg, seed=5))


def test_load_manifest_json(tmp_path):
    cfg = config.resolve({"seed": 9})
    (tmp_path / "manifest.json").write_text(json.dumps({"schema": "x", "config": cfg}))
    assert config.load(tmp_path / "manifest.json") == cfg


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "none.cfg")
