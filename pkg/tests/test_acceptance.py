"""Acceptance criteria 1-8.

Each test carries a ``criterion(n)`` marker; the terminal summary prints one PASS/FAIL
line per criterion. Tolerances are pinned here and must not be relaxed.
"""

import hashlib
import json
import math
import os
import re
import time

import numpy as np
import pytest

from quadrl import _layout as L
from quadrl import cli, nn
from quadrl.config import default_config_path
from quadrl.dynamics import GeneralizedState, RobotModel, mechanical_energy, random_quaternion, step
from quadrl.env import (COST_NAMES, FOOT_CLEARANCE, HEIGHT_ESTIMATOR, HEIGHT_THRESHOLD, EnvConfig,
                        Task, TaskKind, observation_layout)
from quadrl.ppo import PpoConfig, clipped_surrogate, gae_advantages, policy_loss_and_grad, train
from quadrl.selector import BEHAVIORS, BehaviorLibrary

from test_dynamics import DT, random_state, stand
from test_env import batch, close, oracle_costs, random_inputs
from test_ppo import brute_force_gae

GRAD_TOL = 1e-5
H_FD = 1e-5
GRAD_FLOOR = 1e-7
GRAD_TIME_LIMIT = 60.0
CLIP_FD_TOL = 1e-8
COST_TOL = 1e-12
COST_STATES = 10_000
BALLISTIC_TOL = 1e-12
PENETRATION_TOL = 1e-3
ENERGY_REL_TOL = 1e-5
QUAT_DRIFT_TOL = 1e-9
GAE_TOL = 1e-12
LEARN_RATIO = 1.5
LEARN_TIME_LIMIT = 30 * 60.0
ESTIMATOR_RATIO = 0.25
TORQUE_LIMIT = 40.0


def sha(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def read_rows(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- criterion 1: gradients ------------------------------------------------------------------
#
# The finite-difference side is evaluated by an independent forward pass in extended
# precision, so round-off in the difference quotient stays far below the tolerance
# even for small gradient components.

LD = np.longdouble


def ld_forward(params, sizes, in_scale, offset, x):
    h = np.asarray(x, dtype=LD) * np.asarray(in_scale, dtype=LD)
    off = 0
    n_layers = len(sizes) - 1
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = params[off : off + o * i].reshape(o, i)
        off += o * i
        b = params[off : off + o]
        off += o
        h = h @ w.T + b
        if k < n_layers - 1:
            h = np.tanh(h)
    return h + np.asarray(offset, dtype=LD), off


def ld_logp(policy, params, obs, act):
    out, used = ld_forward(params, policy.sizes, policy.net.in_scale, policy.net.offset, obs)
    if isinstance(policy, nn.GaussianPolicy):
        log_std = params[used:]
        z = (np.asarray(act, dtype=LD) - out) / np.exp(log_std)
        return (-np.sum(z * z, axis=1) / 2 - np.sum(log_std)
                - LD(policy.act_dim) * np.log(2 * LD(math.pi)) / 2)
    m = out.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(out - m), axis=1))
    return out[np.arange(len(act)), act] - lse


def ld_surrogate(policy, params, obs, act, logp_old, adv, eps):
    rho = np.exp(ld_logp(policy, params, obs, act) - np.asarray(logp_old, dtype=LD))
    adv = np.asarray(adv, dtype=LD)
    return -np.mean(np.minimum(rho * adv, np.clip(rho, 1 - eps, 1 + eps) * adv))


def ld_mse(model, params, obs, y):
    out, _ = ld_forward(params, model.sizes, model.net.in_scale, model.net.offset, obs)
    return np.mean((out[:, 0] - np.asarray(y, dtype=LD)) ** 2)


def stratified_coords(rng, sizes, n_extra, per_block=12):
    """A few weights and biases from every layer plus any trailing extras."""
    idx, off = [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        idx.extend(off + rng.choice(o * i, per_block, replace=False))
        off += o * i
        idx.extend(off + rng.choice(o, min(per_block, o), replace=False))
        off += o
    idx.extend(range(off, off + n_extra))
    return np.array(idx)


def max_rel_error(ld_loss, params, grad, coords):
    p = params.astype(LD)
    worst = 0.0
    for i in coords:
        up, down = p.copy(), p.copy()
        up[i] += LD(H_FD)
        down[i] -= LD(H_FD)
        fd = float((ld_loss(up) - ld_loss(down)) / (2 * LD(H_FD)))
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), GRAD_FLOOR))
    return worst


def deployed_architectures(rng):
    """Every network shape the project trains, at the shipped hidden sizes."""
    nets = []
    for kind in BEHAVIORS:
        n_in = observation_layout(kind, 2).size
        nets.append((f"{kind.value} policy", nn.GaussianPolicy.create(n_in, 12, rng, out_gain=1.0)))
        nets.append((f"{kind.value} value", nn.Regressor.create(n_in, rng)))
    n_sel = observation_layout(TaskKind.SELECTOR, 2).size
    nets.append(("selector policy", nn.CategoricalPolicy.create(n_sel, 3, rng, out_gain=1.0)))
    nets.append(("selector value", nn.Regressor.create(n_sel, rng)))
    nets.append(("height estimator",
                 nn.Regressor.create(observation_layout(HEIGHT_ESTIMATOR, 2).size, rng)))
    return nets


@pytest.mark.criterion(1)
def test_gradient_check_all_architectures():
    start = time.perf_counter()
    worst = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for name, net in deployed_architectures(rng):
            n = 16
            obs = rng.normal(size=(n, net.sizes[0]))
            if isinstance(net, nn.Regressor):
                y = rng.normal(size=n)
                grad = net.loss_and_grad(obs, y)[1]
                extra = 0

                def loss(p, net=net, obs=obs, y=y):
                    return ld_mse(net, p, obs, y)
            else:
                if isinstance(net, nn.GaussianPolicy):
                    act = net.mean(obs) + rng.normal(scale=0.4, size=(n, 12))
                    extra = 12
                else:
                    act = rng.integers(0, 3, n)
                    extra = 0
                logp = net.log_prob(obs, act)
                # ratios inside and outside the clip range, advantages of both signs
                logp_old = logp - rng.uniform(-0.4, 0.4, n)
                adv = rng.normal(size=n)
                grad = policy_loss_and_grad(net, obs, act, logp_old, adv, 0.2)[1]

                def loss(p, net=net, obs=obs, act=act, logp_old=logp_old, adv=adv):
                    return ld_surrogate(net, p, obs, act, logp_old, adv, 0.2)
            coords = stratified_coords(rng, net.sizes, extra)
            err = max_rel_error(loss, net.params.copy(), grad, coords)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    print(f"criterion 1: worst relative error {max(worst.values()):.2e}, {elapsed:.1f}s")
    assert all(v < GRAD_TOL for v in worst.values()), worst
    assert elapsed < GRAD_TIME_LIMIT


# -- criterion 2: clip semantics --------------------------------------------------------------


@pytest.mark.criterion(2)
def test_clipped_binding_samples_have_zero_gradient():
    rng = np.random.default_rng(0)
    n_in = observation_layout(TaskKind.LOCOMOTION, 2).size
    pol = nn.GaussianPolicy.create(n_in, 12, rng)
    obs = rng.normal(size=(8, n_in))
    act, _ = pol.sample(obs, rng)
    logp = pol.log_prob(obs, act)
    rho = np.array([1.5, 1.3, 2.0, 1.21, 0.5, 0.7, 0.1, 0.79])
    adv = np.array([1.0, 0.5, 2.0, 3.0, -1.0, -0.2, -4.0, -1.5])
    logp_old = logp - np.log(rho)
    loss, grad, _ = policy_loss_and_grad(pol, obs, act, logp_old, adv, 0.2)
    assert np.all(grad == 0.0)
    p0 = pol.params.copy()
    for _ in range(10):
        d = rng.normal(size=p0.size)
        d /= np.linalg.norm(d)
        vals = []
        for s in (1e-6, -1e-6):
            pol.set_params(p0 + s * d)
            vals.append(clipped_surrogate(pol.log_prob(obs, act), logp_old, adv, 0.2)[0])
        assert abs(vals[0] - vals[1]) / 2e-6 <= CLIP_FD_TOL


@pytest.mark.criterion(2)
def test_unit_ratio_surrogate_is_mean_advantage():
    rng = np.random.default_rng(1)
    for _ in range(100):
        adv = rng.normal(size=int(rng.integers(1, 300)))
        logp = rng.normal(size=adv.size)
        assert -clipped_surrogate(logp, logp, adv, 0.2)[0] == float(np.mean(adv))


# -- criterion 3: cost oracle ----------------------------------------------------------------


@pytest.mark.criterion(3)
def test_cost_terms_match_oracle():
    rng = np.random.default_rng(2024)
    args = random_inputs(rng, COST_STATES)
    got = batch(*args)
    bad = [e for e in range(COST_STATES) if not close(got[e], oracle_costs(*(a[e] for a in args)))]
    assert not bad, bad[:10]
    assert COST_TOL == 1e-12


@pytest.mark.criterion(3)
def test_cost_boundaries_and_empty_sets():
    assert HEIGHT_THRESHOLD == 0.35 and FOOT_CLEARANCE == 0.07
    args = list(random_inputs(np.random.default_rng(3), 3))
    args[0][:, 2] = [np.nextafter(0.35, 0.0), 0.35, np.nextafter(0.35, 1.0)]
    args[2][:] = 0.05  # nothing touches the ground
    args[4][:, :4, 2] = 0.07
    c = batch(*args)
    np.testing.assert_array_equal(c[:, COST_NAMES.index("height")], [1.0, 0.0, 0.0])
    for name in ("body_impulse", "body_slippage", "foot_slippage", "foot_clearance"):
        np.testing.assert_array_equal(c[:, COST_NAMES.index(name)], 0.0)


# -- criterion 4: physics --------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_ballistic_closed_form():
    model = RobotModel()
    z0, v0 = 10.0, np.array([0.5, -0.3, 2.0])
    s = GeneralizedState.from_parts(position=(0, 0, z0), quat=(1, 0, 0, 0),
                                    joints=model.stance_targets, lin_vel=v0)
    g = model.gravity
    for n in range(1, 401):
        s, _ = step(model, s, np.zeros(12), DT)
        assert abs(s.u[2] - (v0[2] - n * g * DT)) <= BALLISTIC_TOL
        assert abs(s.q[2] - (z0 + n * DT * v0[2] - g * DT * DT * n * (n + 1) / 2)) <= BALLISTIC_TOL
        assert np.all(np.abs(s.q[:2] - n * DT * v0[:2]) <= BALLISTIC_TOL)


@pytest.mark.criterion(4)
def test_rest_penetration():
    model = RobotModel()
    traj = stand(model, 3.0)
    pen = max(float(np.max(rep.penetration[: L.KNEE0])) for _, rep in traj[400:])
    assert pen < PENETRATION_TOL


@pytest.mark.criterion(4)
def test_passive_drop_energy_non_increasing():
    # tolerance: rise above the running minimum <= 1e-5 of the energy dissipated
    model = RobotModel()
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        s = GeneralizedState.from_parts(position=(0, 0, 1.0), quat=random_quaternion(rng),
                                        joints=rng.uniform(model.joint_limits[:, 0],
                                                           model.joint_limits[:, 1]),
                                        ang_vel=rng.normal(size=3))
        e = [mechanical_energy(model, s)]
        for _ in range(800):
            s, _ = step(model, s, np.zeros(12), DT)
            e.append(mechanical_energy(model, s))
        e = np.array(e)
        rise = np.max(e - np.minimum.accumulate(e))
        assert rise <= ENERGY_REL_TOL * (e[0] - e.min()), (seed, rise)


@pytest.mark.criterion(4)
def test_quaternion_norm_drift():
    model = RobotModel()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        s = random_state(model, rng)
        s.u[3:6] = rng.normal(scale=8.0, size=3)
        for _ in range(100):
            before = np.linalg.norm(s.quaternion)
            s, _ = step(model, s, rng.uniform(-40, 40, 12), DT)
            worst = max(worst, abs(np.linalg.norm(s.quaternion) - before))
    assert worst < QUAT_DRIFT_TOL


# -- criterion 5: GAE ------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_gae_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        T = int(rng.integers(1, 200))
        r, v, lv = rng.normal(size=T), rng.normal(size=T), float(rng.normal())
        d = (rng.uniform(size=T) < 0.05).astype(float)
        adv, _ = gae_advantages(r, v, d, lv, 0.99, 0.95)
        assert np.max(np.abs(adv - brute_force_gae(r, v, d, lv, 0.99, 0.95))) <= GAE_TOL


@pytest.mark.criterion(5)
def test_gae_limits():
    rng = np.random.default_rng(6)
    for _ in range(100):
        T = int(rng.integers(1, 200))
        r, v, lv = rng.normal(size=T), rng.normal(size=T), float(rng.normal())
        d = (rng.uniform(size=T) < 0.05).astype(float)
        nxt = np.append(v[1:], lv)
        adv0, _ = gae_advantages(r, v, d, lv, 0.99, 0.0)
        np.testing.assert_array_equal(adv0, r + 0.99 * nxt * (1 - d) - v)
        d[:] = 0.0
        d[-1] = 1.0
        adv1, _ = gae_advantages(r, v, d, lv, 1.0, 1.0)
        assert np.max(np.abs(adv1 - (np.cumsum(r[::-1])[::-1] - v))) <= GAE_TOL


# -- criterion 6: desk-scale learning --------------------------------------------------------


def run_shipped(task, out):
    start = time.perf_counter()
    assert cli.main(["train", "--config", default_config_path(task), "--out", str(out)]) == 0
    return read_rows(out / "metrics.jsonl"), time.perf_counter() - start


@pytest.fixture(scope="module")
def standing_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("standing_up")
    rows, elapsed = run_shipped("standing_up", out)
    return out, rows, elapsed


@pytest.fixture(scope="module")
def locomotion_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("locomotion")
    rows, elapsed = run_shipped("locomotion", out)
    return out, rows, elapsed


@pytest.mark.criterion(6)
def test_standing_up_learns(standing_run):
    out, rows, elapsed = standing_run
    cfg = PpoConfig()
    assert (cfg.num_envs, cfg.horizon) == (16, 400) and len(rows) == 200
    early = float(np.mean([r["average_ll_reward"] for r in rows[0:20]]))
    late = float(np.mean([r["average_ll_reward"] for r in rows[180:200]]))
    print(f"criterion 6: standing-up early {early:.4f} late {late:.4f} in {elapsed:.0f}s")
    assert early > 0.0
    assert late >= LEARN_RATIO * early
    assert elapsed <= LEARN_TIME_LIMIT
    assert len(os.listdir(out / "checkpoints")) == 200 // 200 + 1


@pytest.mark.criterion(6)
def test_locomotion_tracking_improves(locomotion_run):
    _, rows, elapsed = locomotion_run
    early = float(np.mean([r["tracking_cost"] for r in rows[0:20]]))
    late = float(np.mean([r["tracking_cost"] for r in rows[180:200]]))
    print(f"criterion 6: locomotion tracking early {early:.4f} late {late:.4f} in {elapsed:.0f}s")
    assert late < early
    assert elapsed <= LEARN_TIME_LIMIT


# -- criterion 7: selector harness -----------------------------------------------------------


@pytest.fixture(scope="module")
def selector_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("selector")
    lib = BehaviorLibrary.scripted(RobotModel())
    paths = {}
    for kind, pol in lib.policies.items():
        paths[kind.value] = str(tmp / f"{kind.value}.bin")
        nn.save_checkpoint(paths[kind.value], pol, metadata={"task": kind.value})
    before = {k: sha(p) for k, p in paths.items()}
    with open(default_config_path("selector")) as fh:
        text = fh.read()
    for k, p in paths.items():
        text = re.sub(rf'^{k} = "scripted"$', f'{k} = "{p}"', text, flags=re.M)
    (tmp / "selector.toml").write_text(text)
    out = tmp / "run"
    assert cli.main(["train-selector", "--config", str(tmp / "selector.toml"),
                     "--out", str(out)]) == 0
    after = {k: sha(p) for k, p in paths.items()}
    return out, read_rows(out / "selector_metrics.jsonl"), before, after


@pytest.mark.criterion(7)
def test_estimator_beats_constant_baseline(selector_run):
    _, rows, _, _ = selector_run
    assert len(rows) == 100
    last = rows[-1]
    print(f"criterion 7: held-out mse {last['estimator_mse']:.3e} "
          f"baseline {last['baseline_mse']:.3e}")
    assert last["estimator_mse"] < ESTIMATOR_RATIO * last["baseline_mse"]


@pytest.mark.criterion(7)
def test_warmup_switch(selector_run):
    _, rows, _, _ = selector_run
    n_w = 50
    first_estimated = next(r["iteration"] for r in rows if r["height_source"] == "estimated")
    assert first_estimated == n_w + 1
    assert all(r["height_source"] == ("true" if r["iteration"] <= n_w else "estimated")
               for r in rows)


@pytest.mark.criterion(7)
def test_behavior_checkpoints_frozen(selector_run):
    out, _, before, after = selector_run
    assert before == after
    recorded = json.loads((out / "behaviors.json").read_text())
    for kind in BEHAVIORS:
        pol, _, _ = nn.load_checkpoint(out.parent / f"{kind.value}.bin")
        assert recorded[kind.value] == hashlib.sha256(pol.params.tobytes()).hexdigest()


# -- criterion 8: determinism and limits -----------------------------------------------------


@pytest.mark.criterion(8)
def test_metrics_independent_of_worker_count(tmp_path):
    digests = set()
    for workers in (1, 2, 4):
        cfg = PpoConfig(iterations=3, num_envs=4, horizon=100, workers=workers)
        out = tmp_path / f"w{workers}"
        train(Task(TaskKind.LOCOMOTION), cfg, out, seed=11, env_cfg=EnvConfig(workers=workers))
        digests.add(sha(out / "metrics.jsonl"))
    assert len(digests) == 1


@pytest.mark.criterion(8)
def test_logged_torques_within_limit(standing_run, locomotion_run, selector_run):
    rows = standing_run[1] + locomotion_run[1] + selector_run[1]
    peak = max(r["max_torque"] for r in rows)
    assert peak <= TORQUE_LIMIT


@pytest.mark.criterion(8)
def test_stress_eval_holds_command(locomotion_run, tmp_path):
    out, _, _ = locomotion_run
    assert cli.main(["eval", "--config", default_config_path("locomotion"), "--checkpoint",
                     str(out), "--stress", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "trajectory_000.jsonl")
    steps = rows[1:]
    assert len(steps) == 1000
    assert [r["step"] for r in steps] == list(range(1, 1001))
    assert abs(steps[-1]["time"] - 10.0) < 1e-9  # 10 s of sim time
    assert all(r["command"] == [1.6, 0.0, 0.0] for r in steps)
    assert max(max(abs(t) for t in r["torques"]) for r in steps) <= TORQUE_LIMIT
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["episodes"][0]["steps"] == 1000
    assert summary["max_torque"] <= TORQUE_LIMIT
