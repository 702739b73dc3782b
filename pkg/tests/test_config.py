from __future__ import annotations

import json

import pytest

from abra.bench.config import METHODS, ExperimentConfig, load_config
from abra.errors import ArtifactIOError, ConfigError
from conftest import DEFAULT_CONFIG


def test_shipped_default_matches_builtin_defaults():
    assert load_config(DEFAULT_CONFIG).to_dict() == ExperimentConfig.default().to_dict()


def test_defaults_typed_views():
    c = ExperimentConfig.default()
    assert c.seeds == [0, 1, 2]
    assert c.methods == list(METHODS)
    assert c.split.target_unavailable == (3, 4)
    assert c.band.half_width == 2
    assert c.schedule("class").epochs == 12 and c.schedule("class").lr_drop_epochs == (7, 9)
    assert c.domain("target").angle == 1.2
    assert c.domain_trainable[:2] == ["layer0.weight", "layer0.bias"]


def test_hash_ignores_output_dir_only():
    a = ExperimentConfig.default()
    b = a.with_overrides(output_dir="elsewhere")
    assert a.config_hash() == b.config_hash()
    assert "output_dir" not in a.science_dict()
    c = a.with_overrides(seeds=[0, 1])
    assert a.config_hash() != c.config_hash()


def test_nested_override_keeps_siblings():
    c = ExperimentConfig.default().with_overrides(split={"samples_per_class": 64})
    assert c.split.samples_per_class == 64
    assert c.split.eval_samples_per_class == 256


@pytest.mark.parametrize(
    "doc,key",
    [
        ({"bogus": 1}, "bogus"),
        ({"model": {"widht": 3}}, "model.widht"),
        ({"seeds": []}, "seeds"),
        ({"seeds": [1, 1]}, "seeds"),
        ({"model": {"activation": "relu"}}, "model.activation"),
        ({"split": {"target_available": [0, 1, 3]}}, "split.target_available"),
        ({"split": {"target_unavailable": [3, 7]}}, "split.target_unavailable"),
        ({"split": {"top_k": 4}}, "split.top_k"),
        ({"schedules": {"class": {"lr": -1}}}, "schedules.class.lr"),
        ({"schedules": {"class": {"momentum": 0.9}}}, "schedules.class.momentum"),
        ({"layers": {"class": ["layer7.weight"]}}, "layers.class"),
        ({"band": {"half_width": 32}}, "band.half_width"),
        ({"methods": ["abra", "magic"]}, "methods"),
        ({"fewshot": {"shots": [0]}}, "fewshot.shots"),
        ({"fewshot": {"shots": [600]}}, "fewshot.shots"),
        ({"domains": {"source": {"noise": -1.0}}}, "domains.source"),
        ({"world": {"spread": 0.0}}, "world.spread"),
    ],
)
def test_invalid_configs_name_the_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        ExperimentConfig.from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"band": {"half_width": -1}}))
    with pytest.raises(ConfigError, match="wrong.json"):
        load_config(wrong)


def test_partial_file_is_filled_from_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seeds": [4]}))
    c = load_config(path)
    assert c.seeds == [4] and c.width == 32
