"""Command-line entry point.

    quadrl train          --config run.toml [--seed N] [--out DIR] [--checkpoint CKPT_DIR]
    quadrl train-selector --config run.toml [--seed N] [--out DIR] [--checkpoint CKPT_DIR]
    quadrl eval           --checkpoint POLICY --config run.toml [--episodes N] [--stress]
    quadrl replay         FILE [--out DIR]

Exit status is 0 on success, 2 for invalid input (config, checkpoint or log) and 1 when
a run fails. ``--checkpoint`` on the training commands resumes from a checkpoint
directory written by an earlier run of the same config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import nn
from .config import SCRIPTED, ConfigError, RunConfig, load_config
from .dynamics import ContactReport, GeneralizedState, model_from_dict
from .env import (COST_NAMES, HEIGHT_ESTIMATOR, Command, HistoryBuffer, TaskKind, VecEnv,
                  compute_cost_terms)
from . import _layout as KL
from .ppo import train
from .selector import BEHAVIORS, BehaviorLibrary, height_estimate, train_selector

logger = logging.getLogger("quadrl")

TRAJECTORY_SCHEMA = "quadrl.trajectory"
TRAJECTORY_VERSION = 1
STRESS_SPEED = 1.6
STRESS_STEPS = 1000
SERIES = {
    "Surrogate Advantage Function": "surrogate_loss",
    "PPO Learning rate": "learning_rate",
    "PPO Value function": "value_loss",
}
REPLAY_TOLERANCE = 1e-9


class UsageError(Exception):
    pass


def _progress(rec):
    logger.info("iter %d  average ll reward %.4f", rec["iteration"], rec["average_ll_reward"])


def _prepare_run(cfg: RunConfig, args) -> str:
    if args.seed is not None:
        cfg.seed = args.seed
    out = cfg.resolved_output(args.out)
    os.makedirs(out, exist_ok=True)
    cfg.write_snapshot(os.path.join(out, "config.toml"))
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.task == TaskKind.SELECTOR:
        raise UsageError("task 'selector' is trained with the train-selector command")
    out = _prepare_run(cfg, args)
    train(cfg.make_task(), cfg.ppo, out, seed=cfg.seed, model=cfg.model, actuator=cfg.actuator,
          env_cfg=cfg.env, resume_from=args.checkpoint, progress=_progress)
    print(f"trained {cfg.ppo.iterations} iterations -> {out}")
    return 0


def load_library(cfg: RunConfig) -> BehaviorLibrary:
    h = cfg.env.history_length
    scripted = BehaviorLibrary.scripted(cfg.model, h)
    policies = {}
    for kind in BEHAVIORS:
        src = cfg.behaviors[kind.value]
        if src == SCRIPTED:
            policies[kind] = scripted.policies[kind]
            continue
        path = os.path.join(src, "policy.bin") if os.path.isdir(src) else src
        if not os.path.exists(path):
            raise UsageError(f"behavior '{kind.value}': no policy at {path}")
        pol, _, meta = nn.load_checkpoint(path)
        if meta.get("task") not in (None, kind.value):
            raise UsageError(f"behavior '{kind.value}': {path} holds a '{meta['task']}' policy")
        policies[kind] = pol
    try:
        return BehaviorLibrary(policies, h)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train_selector(args) -> int:
    cfg = load_config(args.config)
    if cfg.task != TaskKind.SELECTOR:
        raise UsageError(f"train-selector needs task 'selector', config has '{cfg.task.value}'")
    library = load_library(cfg)
    out = _prepare_run(cfg, args)
    train_selector(library, cfg.selector, cfg.ppo, out, seed=cfg.seed, model=cfg.model,
                   actuator=cfg.actuator, env_cfg=cfg.env, task=cfg.make_task(),
                   resume_from=args.checkpoint, progress=_progress)
    print(f"trained selector for {cfg.ppo.iterations} iterations -> {out}")
    return 0


# -- evaluation ---------------------------------------------------------------------------


def _load_policy(path, layout):
    if os.path.isdir(path):
        for name in ("policy.bin", "selector.bin"):
            if os.path.exists(os.path.join(path, name)):
                path = os.path.join(path, name)
                break
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        policy, _, meta = nn.load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(f"cannot load {path}: {exc}") from None
    stored = meta.get("obs_layout")
    if policy.sizes[0] != layout.size or (stored is not None and stored != layout.manifest()):
        raise UsageError(f"checkpoint {path} was trained on a different observation layout "
                         f"than task '{layout.kind}'")
    return policy, path


def _contact_summary(gap, imp, pos, vel, flags) -> dict:
    return {"raw_gap": gap.tolist(), "impulse": imp.tolist(), "position": pos.tolist(),
            "velocity": vel.tolist(), "self_flags": [int(x) for x in flags]}


def run_episode(cfg: RunConfig, policy, episode: int, stress: bool, estimator=None,
                library=None, log_path=None) -> dict:
    """One deterministic episode; optionally logs a trajectory. Returns its summary."""
    task = cfg.make_task()
    if stress:
        task = replace(task, episode_length=STRESS_STEPS, terminate_on_body_contact=False)
    env = VecEnv(cfg.model, cfg.actuator, task, 1, cfg.seed * 100_003 + episode,
                 replace(cfg.env, workers=1))
    if stress:
        env.fixed_command = np.array([STRESS_SPEED, 0.0, 0.0])
    env.reset()
    fh = open(log_path, "w") if log_path else None
    if fh:
        header = {"schema": TRAJECTORY_SCHEMA, "version": TRAJECTORY_VERSION,
                  "task": task.kind.value, "episode": episode, "seed": cfg.seed, "stress": stress,
                  "model": cfg.model.to_dict(), "weights": task.reward_weights,
                  "control_dt": cfg.env.control_dt, "alpha_ang": cfg.env.alpha_ang,
                  "alpha_lin": cfg.env.alpha_lin,
                  "joint_target": env.joint_target.tolist()}
        fh.write(json.dumps(header) + "\n")
    rewards, track, tau_peak = [], [], 0.0
    violations = {"self_collision": 0, "body_contact": 0, "joint_speed": 0, "torque_saturation": 0}
    steps = 0
    choice = 0
    while True:
        if library is not None:
            env.set_height_estimates(height_estimate(estimator, env.observe(HEIGHT_ESTIMATOR)))
            if steps % cfg.selector.decision_period == 0:
                choice = int(policy.deterministic_action(env.observe())[0])
                env.set_selector_action(nn.one_hot(np.array([choice]), len(BEHAVIORS)))
            action = library.actions(env, np.array([choice]))
        else:
            action = policy.deterministic_action(env.observe())
        prev_vel = env.hist_vel[0, 0].copy()
        prev_action = env.prev_action[0].copy()
        command = env.command[0].copy()
        res = env.step(action)
        gap, imp, pos, vel, flags = (c[0] for c in res.contacts)
        steps += 1
        q, u = res.final_q[0], res.final_u[0]
        tau = res.tau[0]
        tau_peak = max(tau_peak, float(np.max(np.abs(tau))))
        rewards.append(float(res.reward[0]))
        costs = res.costs[0]
        track.append(float(costs[0] + costs[1]))
        violations["self_collision"] += int(flags.sum())
        violations["body_contact"] += int(np.any(gap[KL.KNEE0 :] <= 0.0))
        violations["torque_saturation"] += int(np.any(np.abs(tau) >= cfg.model.torque_limit - 1e-9))
        if fh:
            rec = {"step": steps, "time": steps * cfg.env.control_dt, "command": command.tolist(),
                   "action": action[0].tolist(), "prev_action": prev_action.tolist(),
                   "prev_joint_vel": prev_vel.tolist(), "torques": tau.tolist(),
                   "costs": dict(zip(COST_NAMES, costs.tolist())), "reward": rewards[-1],
                   "contacts": _contact_summary(gap, imp, pos, vel, flags),
                   "q": q.tolist(), "u": u.tolist()}
            fh.write(json.dumps(rec) + "\n")
        violations["joint_speed"] += int(np.any(np.abs(u[6:]) > cfg.model.joint_speed_limit))
        if res.done[0]:
            break
    if fh:
        fh.close()
    env.close()
    return {"episode": episode, "steps": steps, "mean_reward": float(np.mean(rewards)),
            "return": float(np.sum(rewards)), "mean_tracking_cost": float(np.mean(track)),
            "max_torque": tau_peak, "violations": violations,
            "command_speed": STRESS_SPEED if stress else None}


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.stress and cfg.task != TaskKind.LOCOMOTION:
        raise UsageError("the stress test runs the locomotion task")
    layout_env = VecEnv(cfg.model, cfg.actuator, cfg.make_task(), 1, 0, replace(cfg.env, workers=1))
    policy, path = _load_policy(args.checkpoint, layout_env.layout)
    layout_env.close()
    estimator = library = None
    if cfg.task == TaskKind.SELECTOR:
        est_path = os.path.join(os.path.dirname(path), "estimator.bin")
        if not os.path.exists(est_path):
            raise UsageError(f"selector evaluation needs {est_path}")
        estimator, _, _ = nn.load_checkpoint(est_path)
        library = load_library(cfg)
    out = cfg.resolved_output(args.out if args.out is not None else
                              os.path.join(cfg.output_dir, "eval"))
    os.makedirs(out, exist_ok=True)
    episodes = []
    for ep in range(args.episodes):
        log = os.path.join(out, f"trajectory_{ep:03d}.jsonl")
        episodes.append(run_episode(cfg, policy, ep, args.stress, estimator, library, log))
    summary = {
        "checkpoint": os.path.abspath(path),
        "task": cfg.task.value,
        "seed": cfg.seed,
        "episodes": episodes,
        "mean_reward": float(np.mean([e["mean_reward"] for e in episodes])),
        "mean_tracking_cost": float(np.mean([e["mean_tracking_cost"] for e in episodes])),
        "max_torque": max(e["max_torque"] for e in episodes),
        "violations": {k: sum(e["violations"][k] for e in episodes)
                       for k in episodes[0]["violations"]},
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps({k: summary[k] for k in ("mean_reward", "mean_tracking_cost", "max_torque",
                                              "violations")}, sort_keys=True))
    return 0


# -- replay ---------------------------------------------------------------------------------


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{no}: not a JSON record ({exc.msg})") from None
    return rows


def recompute_costs(header: dict, rec: dict) -> np.ndarray:
    """Cost terms of one logged step, derived from the logged state alone."""
    model = model_from_dict(header["model"])
    state = GeneralizedState(np.array(rec["q"]), np.array(rec["u"]))
    contacts = ContactReport.from_dict(rec["contacts"])
    hist = HistoryBuffer(1)
    hist.velocities[0] = rec["prev_joint_vel"]
    vx, vy, wz = rec["command"]
    costs = compute_cost_terms(
        model, state, contacts, rec["torques"], hist, rec["action"], rec["prev_action"],
        Command(vx, vy, wz), joint_target=header["joint_target"], control_dt=header["control_dt"],
        alpha_ang=header["alpha_ang"], alpha_lin=header["alpha_lin"],
    )
    return costs.as_array()


def replay_trajectory(rows, out) -> float:
    header, steps = rows[0], rows[1:]
    if header.get("schema") != TRAJECTORY_SCHEMA:
        raise UsageError("not a trajectory log")
    if header.get("version") != TRAJECTORY_VERSION:
        raise UsageError(f"trajectory schema version {header.get('version')} is not supported "
                         f"(expected {TRAJECTORY_VERSION})")
    worst = 0.0
    with open(os.path.join(out, "steps.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "reward", *COST_NAMES, "max_abs_torque", "height"])
        for rec in steps:
            logged = np.array([rec["costs"][k] for k in COST_NAMES])
            derived = recompute_costs(header, rec)
            worst = max(worst, float(np.max(np.abs(derived - logged))))
            height = rec["q"][2]
            w.writerow([rec["step"], rec["time"], rec["reward"], *logged.tolist(),
                        max(abs(t) for t in rec["torques"]), height])
    return worst


def write_series(rows, out) -> list[str]:
    written = []
    for caption, key in SERIES.items():
        path = os.path.join(out, f"{caption}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", key])
            for r in rows:
                v = r.get(key)
                w.writerow([r["iteration"], "" if v is None else v])
        written.append(path)
    return written


def cmd_replay(args) -> int:
    path = args.file
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    stem = os.path.splitext(os.path.basename(path))[0]
    out = args.out if args.out is not None else os.path.join(os.path.dirname(path) or ".",
                                                             f"{stem}_replay")
    rows = _read_jsonl(path)
    if not rows:
        print("empty log, nothing to replay")
        return 0
    os.makedirs(out, exist_ok=True)
    if "schema" in rows[0]:
        worst = replay_trajectory(rows, out)
        print(f"{len(rows) - 1} steps; max cost recomputation error {worst:.3e}")
        if not worst <= REPLAY_TOLERANCE:
            print(f"cost recomputation differs by {worst:.3e} (> {REPLAY_TOLERANCE})",
                  file=sys.stderr)
            return 1
        return 0
    if "iteration" in rows[0]:
        for p in write_series(rows, out):
            print(p)
        return 0
    raise UsageError(f"{path}: neither a metrics file nor a trajectory log")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadrl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, hlp in (("train", cmd_train, "train a behavior policy with PPO"),
                          ("train-selector", cmd_train_selector,
                           "train the behavior selector and height estimator")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--checkpoint", help="checkpoint directory to resume from")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", help="deterministic evaluation with trajectory logs")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True, help="policy file or run directory")
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--stress", action="store_true",
                   help=f"hold a {STRESS_SPEED} m/s command for {STRESS_STEPS} control steps")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("replay", help="tabulate a trajectory log or a metrics file")
    s.add_argument("file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "episodes", 1) is not None and getattr(args, "episodes", 1) < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; resume with --checkpoint <run>/checkpoints/<latest>", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
