import json

import pytest

from mddistill.config import DEFAULTS, ConfigError, RunConfig


def test_defaults_validate_and_map_to_components():
    cfg = RunConfig()
    d = cfg.distill_config()
    assert (d.syn_steps, d.expert_epochs, d.mini_batch_size, d.lr_lr) == (8, 1, 20, 0.01)
    assert d.lr_teacher == cfg["buffer"]["lr"]
    assert cfg.loss_config().beta == 0.5
    assert cfg.architecture().d_emb == 64


def test_overrides_merge_into_nested_sections():
    cfg = RunConfig({"distill": {"iterations": 7}, "blend": {"enabled": False}})
    assert cfg["distill"]["iterations"] == 7
    assert cfg["distill"]["syn_steps"] == DEFAULTS["distill"]["syn_steps"]
    assert cfg.blend_config().enabled is False


def test_unknown_keys_are_rejected_with_their_path():
    with pytest.raises(ConfigError, match="distill.itterations"):
        RunConfig({"distill": {"itterations": 5}})
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig({"bogus": 1})


@pytest.mark.parametrize(
    "override",
    [
        {"distill": {"iterations": "many"}},
        {"blend": {"enabled": 1}},
        {"distill": {"max_start_epoch": 6}},
        {"noise": {"lambdas": [0.0, 1.5]}},
        {"data": {"train_file": "a.mdde"}},
        {"eval": {"lr": -1}},
        {"buffer": {"epochs": 0}},
        {"loss": {"kind": "hinge"}},
        {"precision": "f16"},
    ],
)
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        RunConfig(override)


def test_integers_accepted_where_floats_expected():
    assert RunConfig({"buffer": {"lr": 1}})["buffer"]["lr"] == 1


def test_set_revalidates():
    cfg = RunConfig()
    cfg.set("distill.iterations", 3)
    assert cfg["distill"]["iterations"] == 3
    with pytest.raises(ConfigError):
        cfg.set("distill.expert_epochs", 0)


def test_echo_round_trip(tmp_path):
    cfg = RunConfig({"seed": 4, "distill": {"lr_sim": 0.5}})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(path).doc == cfg.doc
    assert RunConfig.load(path).to_json() == cfg.to_json()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.load(bad)
    bad.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.load(bad)
