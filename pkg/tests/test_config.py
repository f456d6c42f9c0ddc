import pytest

from latentvr.config import ConfigError, ModelConfig, RunConfig, TrainConfig, \
    load_run_config, parse_run_config

TOML = """
[model]
n_layers = 2
d_model = 32
n_heads = 4

[train]
epochs = 3
lr = 0.001

[scfvr]
replay_k = 16
window = 4

[rds]
retention = "cosine"
max_depth = 2

[paths]
data = "train.jsonl"
"""


def test_load_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(TOML)
    run = load_run_config(str(p), env={})
    assert (run.model.n_layers, run.model.d_model, run.model.replay_k) == (2, 32, 16)
    assert run.model.retention == "cosine" and run.model.max_depth == 2
    assert run.train.epochs == 3 and run.train.lr == 1e-3
    assert run.paths == {"data": "train.jsonl"}
    # untouched fields keep their defaults
    assert run.model.grid == ModelConfig().grid and run.train.beta2 == TrainConfig().beta2


def test_defaults_are_valid():
    run = parse_run_config({}, env={})
    assert run.model == ModelConfig() and run.train == TrainConfig()


def test_env_overrides_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(TOML)
    env = {"LATENTVR_TRAIN__EPOCHS": "7", "LATENTVR_SCFVR__WINDOW": "2",
           "LATENTVR_RDS__RESTRICT_REFINE": "false", "UNRELATED": "x"}
    run = load_run_config(str(p), env=env)
    assert run.train.epochs == 7 and run.model.window == 2
    assert run.model.restrict_refine is False


def test_all_problems_reported_together():
    raw = {"model": {"n_layers": 0, "d_model": 30, "n_heads": 4, "colour": 1},
           "train": {"lr": -1.0, "batch": "many"},
           "scfvr": {"replay_k": 500},
           "extra": {}}
    with pytest.raises(ConfigError) as info:
        parse_run_config(raw, env={})
    text = "\n".join(info.value.problems)
    for needle in ("model.n_layers", "divisible", "unknown key model.colour", "train.lr",
                   "train.batch", "scfvr.replay_k", "unknown section [extra]"):
        assert needle in text
    assert len(info.value.problems) == 7


def test_key_in_wrong_section():
    with pytest.raises(ConfigError, match="unknown key model.window"):
        parse_run_config({"model": {"window": 3}}, env={})
    with pytest.raises(ConfigError, match="unknown key rds.n_layers"):
        parse_run_config({"rds": {"n_layers": 3}}, env={})


def test_bool_is_not_int():
    with pytest.raises(ConfigError, match="expected int"):
        parse_run_config({"model": {"n_layers": True}}, env={})


def test_to_toml_round_trip(tmp_path):
    run = parse_run_config({"model": {"n_layers": 3}, "rds": {"retention": "cosine"},
                            "train": {"mode": "nocot"}, "paths": {"out": "a \"b\""}}, env={})
    p = tmp_path / "back.toml"
    p.write_text(run.to_toml())
    back = load_run_config(str(p), env={})
    assert back == run


def test_model_dict_round_trip():
    cfg = ModelConfig(n_layers=3, dtype="float32")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert isinstance(RunConfig().model, ModelConfig)
