import json

import pytest

from tokenrate.config import ConfigError, RunConfig, load_config, parse_config


def test_default_round_trip(tmp_path):
    rc = RunConfig()
    (tmp_path / "c.json").write_text(rc.dumps())
    back = load_config(tmp_path / "c.json")
    assert back == rc
    assert back.dumps() == rc.dumps()


def test_partial_sections_fill_defaults():
    rc = parse_config({"search": {"epochs": 7}})
    assert rc.search.epochs == 7
    assert rc.search.lambda_f == 5.0 and rc.train == RunConfig().train


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_config({"search": {"epoch": 3}})
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_config({"serach": {}})


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigError, match="disagree"):
        parse_config({"model": {"image_size": 32, "patch_size": 4, "embed_dim": 32, "heads": 4}})


def test_invalid_values_and_json(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"search": {"option": "shuffle"}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_seed_reaches_every_stage():
    rc = RunConfig().with_seed(99)
    assert rc.train.seed == 99 and rc.search.seed == 99


def test_published_defaults_listed():
    d = json.loads(RunConfig().dumps())
    assert d["published_defaults"]["search"]["lambda_f"] == 5.0
    assert d["search"]["lr"] == 0.01 and d["search"]["epochs"] == 3
