import json

import pytest

from adaptive_distill.config import DEFAULTS, RunConfig
from adaptive_distill.exceptions import ConfigError


def test_defaults():
    c = RunConfig()
    assert c.generator_config().num_classes == 3
    assert c.scales == (1.5, 2.5, 4.0)
    assert c.window("teacher") == 3
    assert c.loss_hyperparams().beta == 1.5
    assert c.trainer_config().workers == 1
    assert len(c.anchors()) == 12 * 12 * 3


def test_hash_ignores_key_order_and_spelled_defaults(tmp_path):
    a = {"loss": {"beta": 1.0, "gamma": 2.0}, "trainer": {"seed": 3}}
    b = {"trainer": {"seed": 3}, "loss": {"gamma": 2.0, "beta": 1.0}}
    assert RunConfig(a).config_hash == RunConfig(b).config_hash
    assert RunConfig().config_hash == RunConfig(DEFAULTS).config_hash
    assert RunConfig(a).config_hash != RunConfig().config_hash
    RunConfig(a).save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").config_hash == RunConfig(a).config_hash


@pytest.mark.parametrize("doc", [
    {"bogus": 1}, {"loss": {"betta": 1.0}}, {"loss": {"gamma": -1}}, {"model": {"student_window": 2}},
    {"version": 2}, {"anchors": {"t_pos": 0.3, "t_neg": 0.4}}, {"mixing": {"rho": 2}},
    {"trainer": {"loss_mode": "nope"}}, {"generator": 5}])
def test_rejects(doc):
    with pytest.raises(ConfigError):
        RunConfig(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_override():
    c = RunConfig().override("trainer", iterations=10)
    assert c.trainer_config().iterations == 10
    with pytest.raises(ConfigError):
        c.override("trainer", itr=1)
    assert json.loads(json.dumps(c.to_dict()))["trainer"]["iterations"] == 10
