import json

import pytest

from aida.config import RunConfig, config_to_dict, load_config, parse_config
from aida.errors import ConfigError


def test_defaults_round_trip():
    doc = config_to_dict(RunConfig())
    assert parse_config(json.loads(json.dumps(doc))) == RunConfig()


def test_nested_override():
    cfg = parse_config({"format_version": 1, "seed": 4, "train": {"loss": {"margin": 0.5}, "hidden_dims": [8, 8]}})
    assert cfg.train.loss.margin == 0.5 and cfg.train.hidden_dims == (8, 8)
    assert cfg.train_config().seed == 4


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"format_version": 1, "sed": 1}, "sed"),
        ({"format_version": 1, "train": {"loss": {"margn": 0.2}}}, "train.loss.margn"),
        ({"format_version": 1, "train": {"seed": 3}}, "train.seed"),
        ({"format_version": 1, "data": {"feature_dims": 3}}, "data.feature_dims"),
    ],
)
def test_unknown_keys_named(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(doc)


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"format_version": 2},
        {"format_version": 1, "seed": "zero"},
        {"format_version": 1, "train": {"use_pmr": 1}},
        {"format_version": 1, "train": {"hidden_dims": 8}},
        {"format_version": 1, "train": {"controller": {"mode": "sometimes"}}},
        {"format_version": 1, "ablate": {"settings": ["E"]}},
        {"format_version": 1, "ablate": {"protocol": "kfold"}},
        {"format_version": 1, "train": {"lr_sup": -1}},
    ],
)
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    assert load_config(None) == RunConfig()
