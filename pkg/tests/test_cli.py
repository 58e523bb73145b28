import json
import os
import re

import numpy as np
import pytest

from quadrl import cli
from quadrl.config import default_config_path
from quadrl.env import COST_NAMES

TINY_PPO = """[ppo]
iterations = 3
num_envs = 2
horizon = 8
minibatch_size = 8
epochs = 1
checkpoint_every = 2
hidden = [16]
"""


def tiny_config(tmp_path, task="locomotion", name="cfg.toml"):
    with open(default_config_path(task)) as fh:
        text = fh.read()
    text = re.sub(r"\[ppo\]\n(.+\n)+", TINY_PPO, text)
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = tiny_config(tmp)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp / "run")]) == 0
    return tmp, cfg


def test_train_outputs(trained):
    tmp, _ = trained
    run = tmp / "run"
    rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    assert sorted(os.listdir(run / "checkpoints")) == ["iter_000000", "iter_000002"]
    assert (run / "config.toml").exists() and (run / "policy.bin").exists()


def test_snapshot_reproduces_run(trained, tmp_path):
    tmp, _ = trained
    assert cli.main(["train", "--config", str(tmp / "run/config.toml"),
                     "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again/metrics.jsonl").read_bytes() == (tmp / "run/metrics.jsonl").read_bytes()
    assert (tmp_path / "again/config.toml").read_bytes() == (tmp / "run/config.toml").read_bytes()


def test_output_root(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    monkeypatch.setenv("QUADRL_OUTPUT_ROOT", str(tmp_path / "root"))
    assert cli.main(["train", "--config", cfg, "--out", "rel"]) == 0
    assert (tmp_path / "root/rel/metrics.jsonl").exists()


def test_resume(trained, tmp_path):
    tmp, cfg = trained
    part = tmp_path / "part"
    with open(cfg) as fh:
        short = fh.read().replace("iterations = 3", "iterations = 2")
    (tmp_path / "short.toml").write_text(short)
    assert cli.main(["train", "--config", str(tmp_path / "short.toml"), "--out", str(part)]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(part),
                     "--checkpoint", str(part / "checkpoints/iter_000002")]) == 0
    assert (part / "metrics.jsonl").read_bytes() == (tmp / "run/metrics.jsonl").read_bytes()


def test_eval_and_replay(trained, tmp_path, capsys):
    tmp, cfg = trained
    out = tmp_path / "eval"
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run"),
                     "--episodes", "2", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["episodes"]) == 2 and summary["max_torque"] <= 40.0
    assert cli.main(["replay", str(out / "trajectory_000.jsonl")]) == 0
    assert "max cost recomputation error" in capsys.readouterr().out
    steps = (out / "trajectory_000_replay/steps.csv").read_text().splitlines()
    assert steps[0].split(",")[3:3 + len(COST_NAMES)] == list(COST_NAMES)


def test_eval_deterministic(trained, tmp_path):
    tmp, cfg = trained
    for name in ("a", "b"):
        assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run/policy.bin"),
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/trajectory_000.jsonl").read_bytes() == \
        (tmp_path / "b/trajectory_000.jsonl").read_bytes()


def test_recomputed_costs_match(trained, tmp_path):
    tmp, cfg = trained
    cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run"), "--out", str(tmp_path)])
    rows = [json.loads(l) for l in (tmp_path / "trajectory_000.jsonl").read_text().splitlines()]
    for rec in rows[1:]:
        logged = np.array([rec["costs"][k] for k in COST_NAMES])
        assert np.max(np.abs(cli.recompute_costs(rows[0], rec) - logged)) <= 1e-9


def test_replay_metrics_series(trained, tmp_path):
    tmp, _ = trained
    assert cli.main(["replay", str(tmp / "run/metrics.jsonl"), "--out", str(tmp_path)]) == 0
    for caption, key in cli.SERIES.items():
        lines = (tmp_path / f"{caption}.csv").read_text().splitlines()
        assert lines[0] == f"iteration,{key}" and len(lines) == 4
    assert sorted(os.listdir(tmp_path)) == sorted(f"{c}.csv" for c in (
        "Surrogate Advantage Function", "PPO Learning rate", "PPO Value function"))


def test_replay_empty(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert cli.main(["replay", str(tmp_path / "empty.jsonl")]) == 0
    assert not (tmp_path / "empty_replay").exists()


def test_replay_schema_mismatch(trained, tmp_path):
    tmp, cfg = trained
    cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run"), "--out", str(tmp_path)])
    path = tmp_path / "trajectory_000.jsonl"
    lines = path.read_text().splitlines()
    head = json.loads(lines[0])
    head["version"] = 99
    path.write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    assert cli.main(["replay", str(path)]) == 2


def test_replay_garbage(tmp_path):
    (tmp_path / "x.jsonl").write_text("{not json\n")
    assert cli.main(["replay", str(tmp_path / "x.jsonl")]) == 2
    assert cli.main(["replay", str(tmp_path / "missing.jsonl")]) == 2


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    text = open(cfg).read().replace("horizon = 8", "horizon = 8\nbogus = 1")
    open(cfg, "w").write(text)
    assert cli.main(["train", "--config", cfg]) == 2
    assert "bogus" in capsys.readouterr().err


def test_stress_eval(trained, tmp_path):
    tmp, cfg = trained
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run"), "--stress",
                     "--out", str(tmp_path)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "trajectory_000.jsonl").read_text().splitlines()]
    steps = rows[1:]
    assert len(steps) == cli.STRESS_STEPS
    assert abs(steps[-1]["time"] - 10.0) < 1e-9
    assert all(r["command"] == [1.6, 0.0, 0.0] for r in steps)
    assert max(max(abs(t) for t in r["torques"]) for r in steps) <= 40.0


def test_stress_needs_locomotion(trained, tmp_path):
    tmp, _ = trained
    cfg = tiny_config(tmp_path, "standing_up")
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp / "run"), "--stress"]) == 2


def test_train_selector_cli(tmp_path):
    with open(default_config_path("selector")) as fh:
        text = fh.read()
    text = re.sub(r"\[ppo\]\n(.+\n)+", "[ppo]\niterations = 3\nnum_envs = 2\nhorizon = 1\n"
                  "minibatch_size = 2\nepochs = 1\ncheckpoint_every = 2\nhidden = [8]\n", text)
    text = text.replace("warmup_iterations = 50", "warmup_iterations = 1")
    text = text.replace("decision_period = 100", "decision_period = 4")
    text = text.replace("regression_samples = 4096", "regression_samples = 16")
    (tmp_path / "sel.toml").write_text(text)
    out = tmp_path / "sel"
    assert cli.main(["train-selector", "--config", str(tmp_path / "sel.toml"),
                     "--out", str(out)]) == 0
    rows = [json.loads(l) for l in (out / "selector_metrics.jsonl").read_text().splitlines()]
    assert [r["height_source"] for r in rows] == ["true", "true", "estimated"]
    assert cli.main(["eval", "--config", str(tmp_path / "sel.toml"), "--checkpoint",
                     str(out / "selector.bin"), "--out", str(tmp_path / "ev")]) == 0
