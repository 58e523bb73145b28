"""Behavior selection over frozen behavior policies, with a learned height estimator.

The selector picks one of three behaviors every ``decision_period`` control steps. The
chosen behavior's frozen policy then drives the robot with zero action variance. During
the first ``warmup_iterations + 1`` iterations (i = 0..N_w) the locomotion observation
carries the simulator height; from i = N_w + 1 on it carries the estimator's output.
The estimator regresses the true height from proprioception on pairs drawn from a
replay memory that every control step appends to.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .actuator import ActuatorConfig
from .dynamics import RobotModel
from .env import (HEIGHT_ESTIMATOR, EnvConfig, Task, TaskKind, VecEnv, observation_layout,
                  observation_scale)
from .ppo import (PpoConfig, RolloutBatch, _truncate_metrics, gae_advantages, learning_rate_at,
                  ppo_update)

logger = logging.getLogger(__name__)

BEHAVIORS = (TaskKind.SELF_RIGHTING, TaskKind.STANDING_UP, TaskKind.LOCOMOTION)
METRICS_FILE = "selector_metrics.jsonl"


@dataclass(frozen=True)
class SelectorConfig:
    warmup_iterations: int = 50
    regression_samples: int = 4096
    decision_period: int = 100
    memory_capacity: int = 200_000
    estimator_lr: float = 1e-3
    estimator_steps: int = 8
    holdout_fraction: float = 0.1
    holdout_capacity: int = 20_000

    def __post_init__(self):
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if self.regression_samples < 1:
            raise ValueError("regression_samples must be >= 1")
        for name in ("decision_period", "memory_capacity", "estimator_steps", "holdout_capacity"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.estimator_lr > 0:
            raise ValueError("estimator_lr must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


SELECTOR_KEYS = tuple(f.name for f in fields(SelectorConfig))


class ReplayMemory:
    """Fixed-capacity ring buffer of (estimator observation, true height) pairs."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.heights = np.zeros(self.capacity)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def append(self, obs, heights) -> None:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        heights = np.atleast_1d(np.asarray(heights, dtype=float))
        if obs.shape[0] != heights.shape[0]:
            raise ValueError("observation and height counts differ")
        for o, h in zip(obs, heights):
            self.obs[self.head] = o
            self.heights[self.head] = h
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, k: int, rng):
        """``k`` pairs drawn uniformly (with replacement) from the current contents."""
        if self.size == 0:
            raise ValueError("replay memory is empty")
        idx = rng.integers(0, self.size, size=k)
        return self.obs[idx], self.heights[idx]

    def contents(self):
        return self.obs[: self.size], self.heights[: self.size]

    def state(self) -> dict:
        return {"obs": self.obs[: self.size].copy(), "heights": self.heights[: self.size].copy(),
                "head": self.head, "capacity": self.capacity}

    @classmethod
    def from_state(cls, st: dict) -> ReplayMemory:
        mem = cls(st["capacity"], st["obs"].shape[1])
        n = st["obs"].shape[0]
        mem.obs[:n], mem.heights[:n] = st["obs"], st["heights"]
        mem.size, mem.head = n, st["head"]
        return mem


def params_digest(policy) -> str:
    return hashlib.sha256(np.ascontiguousarray(policy.params).tobytes()).hexdigest()


class BehaviorLibrary:
    """The three frozen behavior policies, indexed like the selector's action."""

    def __init__(self, policies: dict, history_length: int = 2):
        self.history_length = history_length
        self.policies = {}
        self.layouts = {}
        for kind in BEHAVIORS:
            if kind not in policies and kind.value not in policies:
                raise ValueError(f"behavior library needs a {kind.value} policy")
            pol = policies.get(kind, policies.get(kind.value))
            self.policies[kind] = pol
            self.layouts[kind] = observation_layout(kind, history_length)
        self.validate()

    @classmethod
    def from_runs(cls, run_dirs: dict, history_length: int = 2) -> BehaviorLibrary:
        """Load ``policy.bin`` from each behavior's training directory (or file path)."""
        policies = {}
        for kind, path in run_dirs.items():
            if os.path.isdir(path):
                path = os.path.join(path, "policy.bin")
            policies[TaskKind(kind)], _, _ = nn.load_checkpoint(path)
        return cls(policies, history_length)

    @classmethod
    def scripted(cls, model: RobotModel, history_length: int = 2) -> BehaviorLibrary:
        """Zero-weight policies that hold a fixed pose: sitting for self-righting,
        the stance for standing-up and locomotion."""
        poses = {TaskKind.SELF_RIGHTING: model.sitting_targets,
                 TaskKind.STANDING_UP: model.stance_targets,
                 TaskKind.LOCOMOTION: model.stance_targets}
        policies = {}
        for kind, pose in poses.items():
            n_in = observation_layout(kind, history_length).size
            pol = nn.GaussianPolicy((n_in, 8, 12), offset=pose)
            pol.params[:] = 0.0
            policies[kind] = pol
        return cls(policies, history_length)

    def validate(self) -> None:
        for kind, pol in self.policies.items():
            layout = self.layouts[kind]
            if pol.sizes[0] != layout.size or pol.act_dim != 12:
                raise ValueError(
                    f"{kind.value} policy has shape {pol.sizes[0]}->{pol.act_dim}, "
                    f"expected {layout.size}->12"
                )
            out = pol.deterministic_action(np.zeros((1, layout.size)))
            if not np.all(np.isfinite(out)):
                raise ValueError(f"{kind.value} policy produces non-finite actions")

    def digests(self) -> dict:
        return {k.value: params_digest(p) for k, p in self.policies.items()}

    def actions(self, env: VecEnv, choice) -> np.ndarray:
        """Deterministic joint targets for every env from its chosen behavior."""
        choice = np.asarray(choice)
        out = np.zeros((env.num_envs, 12))
        for b, kind in enumerate(BEHAVIORS):
            sel = np.flatnonzero(choice == b)
            if sel.size:
                obs = env.observe(kind)[sel]
                out[sel] = self.policies[kind].deterministic_action(obs)
        return out


def height_estimate(estimator: nn.Regressor, obs) -> np.ndarray:
    """Estimated base height for height-estimator observations (one or a batch)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != estimator.sizes[0]:
        raise ValueError(
            f"height estimator expects {estimator.sizes[0]} inputs, got {obs.shape[-1]}"
        )
    return estimator.predict(obs)


def select_behavior(policy: nn.CategoricalPolicy, obs, rng=None) -> np.ndarray:
    """One-hot behavior choice: sampled with ``rng``, argmax without."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != policy.sizes[0]:
        raise ValueError(f"selector expects {policy.sizes[0]} inputs, got {obs.shape[-1]}")
    if rng is None:
        idx = policy.deterministic_action(obs)
    else:
        idx, _ = policy.sample(obs, rng)
    return nn.one_hot(idx, policy.act_dim)


def create_estimator(history_length: int, rng, hidden=nn.HIDDEN) -> nn.Regressor:
    layout = observation_layout(HEIGHT_ESTIMATOR, history_length)
    return nn.Regressor.create(layout.size, rng, hidden, in_scale=observation_scale(layout))


def estimator_update(estimator: nn.Regressor, adam: nn.AdamState, memory: ReplayMemory,
                     cfg: SelectorConfig, rng):
    """Sample K pairs and take ``estimator_steps`` Adam steps on their squared error.

    Returns ``(adam, loss)``; ``loss`` is None when the memory is empty.
    """
    if len(memory) == 0:
        logger.warning("replay memory empty, estimator update skipped")
        return adam, None
    obs, h = memory.sample(cfg.regression_samples, rng)
    loss = None
    for _ in range(cfg.estimator_steps):
        loss, grad = estimator.loss_and_grad(obs, h)
        new, adam = nn.adam_update(adam, estimator.params, grad)
        estimator.params = new
    return adam, loss


def _mse(estimator, obs, h) -> float | None:
    if len(h) == 0:
        return None
    err = estimator.predict(obs) - h
    return float(np.mean(err * err))


@dataclass
class SelectorState:
    iteration: int
    policy: nn.CategoricalPolicy
    value: nn.Regressor
    estimator: nn.Regressor
    pol_adam: nn.AdamState
    val_adam: nn.AdamState
    est_adam: nn.AdamState
    memory: ReplayMemory
    holdout: ReplayMemory
    env_state: dict
    rng_states: dict


def _ckpt_dir(out_dir, k: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"iter_{k:06d}")


def _save(out_dir, st: SelectorState, meta: dict) -> str:
    path = _ckpt_dir(out_dir, st.iteration)
    os.makedirs(path, exist_ok=True)
    nn.save_checkpoint(os.path.join(path, "selector.bin"), st.policy, st.pol_adam, meta)
    nn.save_checkpoint(os.path.join(path, "selector_value.bin"), st.value, st.val_adam, meta)
    nn.save_checkpoint(os.path.join(path, "estimator.bin"), st.estimator, st.est_adam, meta)
    with open(os.path.join(path, "train_state.pkl"), "wb") as fh:
        pickle.dump({"iteration": st.iteration, "env_state": st.env_state,
                     "rng_states": st.rng_states, "memory": st.memory.state(),
                     "holdout": st.holdout.state()}, fh)
    return path


def uses_true_height(iteration: int, cfg: SelectorConfig) -> bool:
    """Warm-up branch: iterations 0..N_w feed the simulator height."""
    return iteration <= cfg.warmup_iterations


def train_selector(library: BehaviorLibrary, cfg: SelectorConfig, ppo_cfg: PpoConfig, out_dir,
                   seed: int = 0, model: RobotModel | None = None,
                   actuator: ActuatorConfig | None = None, env_cfg: EnvConfig | None = None,
                   task: Task | None = None, resume_from: str | None = None, progress=None):
    """Joint selector/estimator training.

    ``ppo_cfg.horizon`` counts selector decisions per env and iteration, each lasting
    ``cfg.decision_period`` control steps. Returns ``(policy, estimator, metrics)``.
    """
    model = RobotModel() if model is None else model
    actuator = ActuatorConfig(tau_max=model.torque_limit) if actuator is None else actuator
    env_cfg = EnvConfig(workers=ppo_cfg.workers) if env_cfg is None else env_cfg
    if env_cfg.history_length != library.history_length:
        raise ValueError("behavior library and environment use different history lengths")
    task = Task(TaskKind.SELECTOR) if task is None else task
    if task.kind != TaskKind.SELECTOR:
        raise ValueError("selector training needs a selector task")
    digests = library.digests()
    os.makedirs(out_dir, exist_ok=True)
    n_env = ppo_cfg.num_envs
    env = VecEnv(model, actuator, task, n_env, seed, env_cfg)
    sel_layout = env.layout
    he_layout = env.he_layout
    meta = {"task": "selector", "obs_layout": sel_layout.manifest(), "seed": seed,
            "estimator_layout": he_layout.manifest()}
    metrics_path = os.path.join(out_dir, METRICS_FILE)

    if resume_from is None:
        init_rng = np.random.default_rng([seed, 2])
        policy = nn.CategoricalPolicy.create(sel_layout.size, len(BEHAVIORS), init_rng,
                                             ppo_cfg.hidden, in_scale=observation_scale(sel_layout))
        value = nn.Regressor.create(sel_layout.size, init_rng, ppo_cfg.hidden,
                                    in_scale=observation_scale(sel_layout))
        estimator = create_estimator(env_cfg.history_length, init_rng, ppo_cfg.hidden)
        pol_adam = nn.AdamState.zeros(policy.params.size, ppo_cfg.learning_rate)
        val_adam = nn.AdamState.zeros(value.params.size, ppo_cfg.learning_rate)
        est_adam = nn.AdamState.zeros(estimator.params.size, cfg.estimator_lr)
        memory = ReplayMemory(cfg.memory_capacity, he_layout.size)
        holdout = ReplayMemory(cfg.holdout_capacity, he_layout.size)
        act_rngs = [np.random.default_rng([seed, e, 1]) for e in range(n_env)]
        upd_rng = np.random.default_rng([seed, 3])
        est_rng = np.random.default_rng([seed, 4])
        split_rngs = [np.random.default_rng([seed, e, 5]) for e in range(n_env)]
        env.reset()
        start = 0
        open(metrics_path, "w").close()
    else:
        policy, pol_adam, _ = nn.load_checkpoint(os.path.join(resume_from, "selector.bin"))
        value, val_adam, _ = nn.load_checkpoint(os.path.join(resume_from, "selector_value.bin"))
        estimator, est_adam, _ = nn.load_checkpoint(os.path.join(resume_from, "estimator.bin"))
        with open(os.path.join(resume_from, "train_state.pkl"), "rb") as fh:
            saved = pickle.load(fh)
        start = saved["iteration"]
        env.set_state(saved["env_state"])
        memory = ReplayMemory.from_state(saved["memory"])
        holdout = ReplayMemory.from_state(saved["holdout"])
        rs = saved["rng_states"]
        act_rngs, split_rngs = [], []
        for e in range(n_env):
            act_rngs.append(np.random.default_rng())
            act_rngs[-1].bit_generator.state = rs["act"][e]
            split_rngs.append(np.random.default_rng())
            split_rngs[-1].bit_generator.state = rs["split"][e]
        upd_rng, est_rng = np.random.default_rng(), np.random.default_rng()
        upd_rng.bit_generator.state = rs["update"]
        est_rng.bit_generator.state = rs["estimator"]
        _truncate_metrics(metrics_path, start)
    if policy.sizes[0] != sel_layout.size:
        raise ValueError("selector checkpoint does not match the selector layout")

    def snapshot(k):
        return SelectorState(
            k, policy, value, estimator, pol_adam, val_adam, est_adam, memory, holdout,
            env.get_state(),
            {"act": [r.bit_generator.state for r in act_rngs],
             "split": [r.bit_generator.state for r in split_rngs],
             "update": upd_rng.bit_generator.state, "estimator": est_rng.bit_generator.state},
        )

    if resume_from is None:
        _save(out_dir, snapshot(0), meta)

    metrics = []
    horizon, period = ppo_cfg.horizon, cfg.decision_period
    for it in range(start, ppo_cfg.iterations):
        true_height = uses_true_height(it, cfg)
        obs_buf = np.zeros((horizon, n_env, sel_layout.size))
        act_buf = np.zeros((horizon, n_env), dtype=np.int64)
        logp_buf = np.zeros((horizon, n_env))
        rew_buf = np.zeros((horizon, n_env))
        val_buf = np.zeros((horizon, n_env))
        done_buf = np.zeros((horizon, n_env))
        ll_rewards = []
        usage = np.zeros(len(BEHAVIORS))
        tau_max = 0.0
        est_err = []

        def refresh_height():
            if true_height:
                env.set_height_estimates(None)
            else:
                h_e = height_estimate(estimator, env.observe(HEIGHT_ESTIMATOR))
                env.set_height_estimates(h_e)
                est_err.append(h_e - env.true_heights())

        for t in range(horizon):
            refresh_height()
            obs = env.observe()
            choice = np.zeros(n_env, dtype=np.int64)
            logp = np.zeros(n_env)
            for e in range(n_env):
                idx, lp = policy.sample(obs[e : e + 1], act_rngs[e])
                choice[e], logp[e] = idx[0], lp[0]
            obs_buf[t], act_buf[t], logp_buf[t] = obs, choice, logp
            val_buf[t] = value.predict(obs)
            usage += np.bincount(choice, minlength=len(BEHAVIORS))
            env.set_selector_action(nn.one_hot(choice, len(BEHAVIORS)))
            period_reward = np.zeros(n_env)
            period_done = np.zeros(n_env, dtype=bool)
            for _ in range(period):
                refresh_height()
                he_obs = env.observe(HEIGHT_ESTIMATOR)
                h_true = env.true_heights()
                for e in range(n_env):
                    target = holdout if split_rngs[e].random() < cfg.holdout_fraction else memory
                    target.append(he_obs[e], h_true[e])
                res = env.step(library.actions(env, choice))
                period_reward += res.reward
                period_done |= res.done
                ll_rewards.append(res.reward)
                tau_max = max(tau_max, float(np.max(np.abs(res.tau))))
            rew_buf[t] = period_reward / period
            done_buf[t] = period_done
        refresh_height()
        last_values = value.predict(env.observe())

        batch = RolloutBatch(obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf, last_values)
        batch.advantages, batch.returns = gae_advantages(rew_buf, val_buf, done_buf, last_values,
                                                         ppo_cfg.gamma, ppo_cfg.lam)
        pol_adam, val_adam, stats = ppo_update(batch, policy, value, pol_adam, val_adam, ppo_cfg,
                                               upd_rng, learning_rate_at(ppo_cfg, it))
        est_adam, est_loss = estimator_update(estimator, est_adam, memory, cfg, est_rng)
        ho_obs, ho_h = holdout.contents()
        mem_h = memory.contents()[1]
        baseline = None
        if len(ho_h) and len(mem_h):
            baseline = float(np.mean((ho_h - np.mean(mem_h)) ** 2))
        rec = {
            "iteration": it,
            "height_source": "true" if true_height else "estimated",
            "average_ll_reward": float(np.mean(ll_rewards)),
            "selector_reward": float(np.mean(rew_buf)),
            "surrogate_loss": stats.get("surrogate_loss"),
            "value_loss": stats.get("value_loss"),
            "learning_rate": stats.get("learning_rate"),
            "clip_fraction": stats.get("clip_fraction"),
            "aborted": stats.get("aborted", False),
            "estimator_loss": est_loss,
            "estimator_mse": _mse(estimator, ho_obs, ho_h),
            "baseline_mse": baseline,
            "rollout_estimate_mse": (float(np.mean(np.square(est_err))) if est_err else None),
            "usage": {k.value: float(u) for k, u in zip(BEHAVIORS, usage / usage.sum())},
            "memory_size": len(memory),
            "max_torque": tau_max,
        }
        metrics.append(rec)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        if progress is not None:
            progress(rec)
        done = it + 1
        if done % ppo_cfg.checkpoint_every == 0:
            _save(out_dir, snapshot(done), meta)

    if library.digests() != digests:
        raise RuntimeError("behavior policies changed during selector training")
    nn.save_checkpoint(os.path.join(out_dir, "selector.bin"), policy, pol_adam, meta)
    nn.save_checkpoint(os.path.join(out_dir, "estimator.bin"), estimator, est_adam, meta)
    with open(os.path.join(out_dir, "behaviors.json"), "w") as fh:
        json.dump(digests, fh, indent=2, sort_keys=True)
    env.close()
    return policy, estimator, metrics


def config_dict(cfg: SelectorConfig) -> dict:
    return asdict(cfg)
