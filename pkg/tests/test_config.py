import re

import pytest

from quadrl.config import (ConfigError, default_config_path, describe_keys, load_config,
                           parse_config, snapshot_equal)
from quadrl.env import COST_NAMES, DEFAULT_WEIGHTS, TaskKind


def shipped(task) -> str:
    with open(default_config_path(task)) as fh:
        return fh.read()


def line_of(text, pattern):
    for no, line in enumerate(text.splitlines(), 1):
        if re.match(pattern, line):
            return no
    raise AssertionError(pattern)


@pytest.mark.parametrize("task", list(TaskKind))
def test_shipped_configs_load(task):
    cfg = load_config(default_config_path(task))
    assert cfg.task == task
    assert cfg.weights == {k: float(DEFAULT_WEIGHTS[task][k]) for k in COST_NAMES}


def test_missing_weight_rejected():
    text = shipped("locomotion")
    text = re.sub(r"^torque = .*\n", "", text, flags=re.M)
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.toml")
    assert "torque" in str(err.value)
    assert err.value.line == line_of(text, r"\[weights\]")


def test_unknown_key_reports_line():
    text = shipped("standing_up").replace("horizon = 400", "horizon = 400\nhorizn = 3")
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.toml")
    assert err.value.line == line_of(text, r"horizn")
    assert str(err.value).startswith(f"x.toml:{err.value.line}:")


def test_unknown_section():
    with pytest.raises(ConfigError) as err:
        parse_config(shipped("standing_up") + "\n[extra]\na = 1\n")
    assert "extra" in str(err.value)


def test_type_error_reports_line():
    text = shipped("standing_up").replace("num_envs = 16", 'num_envs = "16"')
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line_of(text, r"num_envs")


def test_bool_is_not_int():
    text = shipped("standing_up").replace("num_envs = 16", "num_envs = true")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_syntax_error_line():
    text = shipped("standing_up").replace("horizon = 400", "horizon = = 400")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line_of(text, r"horizon")


def test_invalid_value():
    text = shipped("standing_up").replace("num_envs = 16", "num_envs = 0")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line_of(text, r"num_envs")


def test_unknown_task():
    text = shipped("standing_up").replace('task = "standing_up"', 'task = "dance"')
    with pytest.raises(ConfigError):
        parse_config(text)


def test_selector_sections_need_selector_task():
    with pytest.raises(ConfigError):
        parse_config(shipped("standing_up") + "\n[selector]\nwarmup_iterations = 3\n")


def test_selector_needs_all_behaviors():
    text = re.sub(r'^locomotion = "scripted"\n', "", shipped("selector"), flags=re.M)
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert "locomotion" in str(err.value)


def test_snapshot_roundtrip():
    for task in TaskKind:
        cfg = load_config(default_config_path(task))
        back = parse_config(cfg.dumps())
        assert snapshot_equal(cfg, back)
        assert back.ppo == cfg.ppo and back.env == cfg.env and back.model.to_dict() == cfg.model.to_dict()


def test_output_root(monkeypatch, tmp_path):
    cfg = load_config(default_config_path("standing_up"))
    monkeypatch.delenv("QUADRL_OUTPUT_ROOT", raising=False)
    assert cfg.resolved_output() == "runs/standing_up"
    monkeypatch.setenv("QUADRL_OUTPUT_ROOT", str(tmp_path))
    assert cfg.resolved_output() == str(tmp_path / "runs/standing_up")
    assert cfg.resolved_output("/abs/x") == "/abs/x"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_describe_keys():
    keys = describe_keys()
    assert keys["weights"] == list(COST_NAMES)
    assert "horizon" in keys["ppo"]
