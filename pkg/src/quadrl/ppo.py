"""Actor-critic PPO with the clipped surrogate objective."""

from __future__ import annotations

import json
import logging
import os
import pickle
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .actuator import ActuatorConfig
from .dynamics import RobotModel
from .env import COST_INDEX, EnvConfig, Task, VecEnv, observation_scale

logger = logging.getLogger(__name__)

RATIO_SENTINEL = 1e12
LOG_RATIO_MAX = float(np.log(RATIO_SENTINEL))
METRICS_FILE = "metrics.jsonl"


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch_size: int = 1600
    learning_rate: float = 3e-4
    lr_decay: bool = False
    iterations: int = 200
    horizon: int = 400
    num_envs: int = 16
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    checkpoint_every: int = 200
    workers: int = 1
    hidden: tuple = nn.HIDDEN
    init_log_std: float = nn.INIT_LOG_STD

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        for name in ("epochs", "iterations", "horizon", "num_envs", "minibatch_size",
                     "checkpoint_every", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def batch_size(self) -> int:
        return self.horizon * self.num_envs


PPO_KEYS = tuple(f.name for f in fields(PpoConfig))


def importance_ratio(logp_new, logp_old):
    """exp(logp_new - logp_old), clamped to a finite sentinel on overflow."""
    d = np.asarray(logp_new, dtype=float) - np.asarray(logp_old, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("importance ratio needs finite log-probabilities")
    if np.any(d > LOG_RATIO_MAX):
        logger.warning("importance ratio overflow, clamped to %g", RATIO_SENTINEL)
    return np.exp(np.minimum(d, LOG_RATIO_MAX))


def gae_advantages(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalized advantage estimates and return targets.

    Arrays have time as the first axis (any trailing env axes). ``last_value`` is the
    bootstrap value of the state after the final step.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=float)
    next_adv = np.zeros_like(next_value)
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def surrogate_terms(rho, adv, eps: float):
    """Per-sample min(rho*A, clip(rho)*A) and the mask of samples using the unclipped branch."""
    rho = np.asarray(rho, dtype=float)
    adv = np.asarray(adv, dtype=float)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * adv
    use_unclipped = unclipped <= clipped
    return np.where(use_unclipped, unclipped, clipped), use_unclipped


def clipped_surrogate(logp_new, logp_old, adv, eps: float):
    """Loss = -mean(term). Returns ``(loss, stats)``."""
    rho = importance_ratio(logp_new, logp_old)
    term, _ = surrogate_terms(rho, adv, eps)
    log_ratio = np.asarray(logp_new, float) - np.asarray(logp_old, float)
    stats = {
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > eps)),
        "approx_kl": float(np.mean((rho - 1.0) - log_ratio)),
        "objective": float(np.mean(term)),
    }
    return -float(np.mean(term)), stats


def policy_loss_and_grad(policy, obs, actions, logp_old, adv, eps: float, entropy_coef: float = 0.0):
    """Clipped surrogate loss (minus entropy bonus) and its exact parameter gradient."""
    logp, backprop = policy.logp_and_backward(obs, actions)
    rho = importance_ratio(logp, logp_old)
    term, use_unclipped = surrogate_terms(rho, adv, eps)
    n = term.shape[0]
    loss = -float(np.mean(term))
    # d term / d logp is rho*A on the unclipped branch and 0 where the clip binds.
    grad = backprop(-np.where(use_unclipped, rho * adv, 0.0) / n)
    if entropy_coef:
        if isinstance(policy, nn.CategoricalPolicy):
            ent = policy.entropy(obs)
        else:
            ent = policy.entropy()
        loss -= entropy_coef * ent
        grad -= entropy_coef * policy.entropy_grad()
    log_ratio = logp - np.asarray(logp_old, float)
    stats = {
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > eps)),
        "approx_kl": float(np.mean((rho - 1.0) - log_ratio)),
    }
    return loss, grad, stats


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    costs: np.ndarray | None = None
    tau_max: float = 0.0
    diverged: int = 0
    episodes: int = 0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.rewards.shape))

    def flat(self):
        t, e = self.rewards.shape
        return (self.obs.reshape(t * e, -1), self.actions.reshape(t * e, *self.actions.shape[2:]),
                self.logp.reshape(-1), self.advantages.reshape(-1), self.returns.reshape(-1))


def action_rngs(seed: int, num_envs: int):
    return [np.random.default_rng([seed, e, 1]) for e in range(num_envs)]


def sample_actions(policy, obs, rngs):
    """Per-env sampling so every env draws only from its own stream."""
    mu = policy.mean(obs)
    std = np.exp(policy.log_std)
    noise = np.stack([r.standard_normal(mu.shape[1]) for r in rngs])
    actions = mu + std * noise
    return actions, policy._logp(mu, actions)


def collect_rollout(env: VecEnv, policy, value, horizon: int, rngs, obs=None) -> RolloutBatch:
    """Steps every env ``horizon`` control steps with stochastic actions."""
    obs = env.observe() if obs is None else obs
    n = env.num_envs
    o = np.zeros((horizon, n, obs.shape[1]))
    a = np.zeros((horizon, n, policy.act_dim))
    lp = np.zeros((horizon, n))
    r = np.zeros((horizon, n))
    v = np.zeros((horizon, n))
    d = np.zeros((horizon, n))
    costs = np.zeros((horizon, n, len(COST_INDEX)))
    tau_max = 0.0
    diverged = 0
    for t in range(horizon):
        act, logp = sample_actions(policy, obs, rngs)
        o[t], a[t], lp[t] = obs, act, logp
        v[t] = value.predict(obs)
        res = env.step(act)
        r[t], d[t], costs[t] = res.reward, res.done, res.costs
        tau_max = max(tau_max, float(np.max(np.abs(res.tau))))
        diverged += int(res.diverged.sum())
        obs = res.obs
    return RolloutBatch(o, a, lp, r, v, d, value.predict(obs), costs, tau_max, diverged,
                        int(d.sum()))


def ppo_update(batch: RolloutBatch, policy, value, pol_adam: nn.AdamState, val_adam: nn.AdamState,
               cfg: PpoConfig, rng, lr: float | None = None):
    """K epochs of shuffled minibatch Adam steps on policy and value.

    Mutates ``policy``/``value`` parameters and returns ``(pol_adam, val_adam, stats)``.
    A non-finite loss restores the pre-update parameters and optimizer states.
    """
    if batch.advantages is None:
        batch.advantages, batch.returns = gae_advantages(
            batch.rewards, batch.values, batch.dones, batch.last_values, cfg.gamma, cfg.lam)
    obs, actions, logp_old, adv, returns = batch.flat()
    std = adv.std()
    adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
    lr = cfg.learning_rate if lr is None else lr
    pol_adam = pol_adam.copy()
    val_adam = val_adam.copy()
    pol_adam.lr = val_adam.lr = lr
    saved = (policy.params.copy(), value.params.copy(), pol_adam.copy(), val_adam.copy())
    n = obs.shape[0]
    mb = min(cfg.minibatch_size, n)
    pol_losses, val_losses, clip_fracs, kls = [], [], [], []
    steps = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start : start + mb]
            pl, pg, st = policy_loss_and_grad(policy, obs[idx], actions[idx], logp_old[idx],
                                              adv[idx], cfg.clip_eps, cfg.entropy_coef)
            vl, vg = value.loss_and_grad(obs[idx], returns[idx])
            if not (np.isfinite(pl) and np.isfinite(vl)):
                logger.warning("non-finite loss, update rolled back")
                policy.set_params(saved[0])
                value.params = saved[1]
                return saved[2], saved[3], {"aborted": True, "adam_steps": steps}
            new_p, pol_adam = nn.adam_update(pol_adam, policy.params, pg, cfg.max_grad_norm)
            policy.set_params(new_p)
            new_v, val_adam = nn.adam_update(val_adam, value.params, cfg.value_coef * vg,
                                             cfg.max_grad_norm)
            value.params = new_v
            pol_losses.append(pl)
            val_losses.append(vl)
            clip_fracs.append(st["clip_fraction"])
            kls.append(st["approx_kl"])
            steps += 1
    stats = {
        "aborted": False,
        "adam_steps": steps,
        "surrogate_loss": float(np.mean(pol_losses)),
        "value_loss": float(np.mean(val_losses)),
        "clip_fraction": float(np.mean(clip_fracs)),
        "approx_kl": float(np.mean(kls)),
        "learning_rate": lr,
        "mean_reward": float(np.mean(batch.rewards)),
    }
    return pol_adam, val_adam, stats


# -- training loop -------------------------------------------------------------------------


def learning_rate_at(cfg: PpoConfig, iteration: int) -> float:
    if not cfg.lr_decay:
        return cfg.learning_rate
    return cfg.learning_rate * max(1.0 - iteration / cfg.iterations, 0.0)


def _ckpt_dir(out_dir, k: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"iter_{k:06d}")


@dataclass
class TrainState:
    iteration: int
    policy: object
    value: object
    pol_adam: nn.AdamState
    val_adam: nn.AdamState
    env_state: dict
    action_rng_states: list
    update_rng_state: dict


def _save_checkpoint(out_dir, st: TrainState, meta: dict) -> str:
    path = _ckpt_dir(out_dir, st.iteration)
    os.makedirs(path, exist_ok=True)
    nn.save_checkpoint(os.path.join(path, "policy.bin"), st.policy, st.pol_adam, meta)
    nn.save_checkpoint(os.path.join(path, "value.bin"), st.value, st.val_adam, meta)
    with open(os.path.join(path, "train_state.pkl"), "wb") as fh:
        pickle.dump({"iteration": st.iteration, "env_state": st.env_state,
                     "action_rng_states": st.action_rng_states,
                     "update_rng_state": st.update_rng_state}, fh)
    return path


def latest_checkpoint(out_dir) -> str | None:
    root = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(root):
        return None
    dirs = sorted(d for d in os.listdir(root) if d.startswith("iter_"))
    return os.path.join(root, dirs[-1]) if dirs else None


def metrics_record(iteration: int, batch: RolloutBatch, stats: dict) -> dict:
    c = batch.costs
    tracking = c[..., COST_INDEX["angular_velocity"]] + c[..., COST_INDEX["linear_velocity"]]
    rec = {
        "iteration": iteration,
        "average_ll_reward": float(np.mean(batch.rewards)),
        "surrogate_loss": stats.get("surrogate_loss"),
        "value_loss": stats.get("value_loss"),
        "learning_rate": stats.get("learning_rate"),
        "clip_fraction": stats.get("clip_fraction"),
        "approx_kl": stats.get("approx_kl"),
        "aborted": stats.get("aborted", False),
        "tracking_cost": float(np.mean(tracking)),
        "episodes": batch.episodes,
        "diverged": batch.diverged,
        "max_torque": batch.tau_max,
        "mean_costs": {k: float(np.mean(c[..., i])) for k, i in COST_INDEX.items()},
    }
    return rec


def train(task: Task, cfg: PpoConfig, out_dir, seed: int = 0, model: RobotModel | None = None,
          actuator: ActuatorConfig | None = None, env_cfg: EnvConfig | None = None,
          resume_from: str | None = None, progress=None):
    """Runs ``cfg.iterations`` PPO iterations and writes checkpoints plus metrics.

    Checkpoints hold the state after ``k`` completed iterations for every multiple
    ``k`` of ``cfg.checkpoint_every`` (including 0), so a run of N iterations leaves
    ``N // every + 1`` of them. ``resume_from`` continues from such a directory and
    reproduces the uninterrupted run bit for bit.
    """
    model = RobotModel() if model is None else model
    actuator = ActuatorConfig(tau_max=model.torque_limit) if actuator is None else actuator
    env_cfg = EnvConfig(workers=cfg.workers) if env_cfg is None else env_cfg
    os.makedirs(out_dir, exist_ok=True)
    env = VecEnv(model, actuator, task, cfg.num_envs, seed, env_cfg)
    scale = observation_scale(env.layout)
    n_obs = env.layout.size
    meta = {"task": task.kind.value, "obs_layout": env.layout.manifest(), "seed": seed}
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    if resume_from is None:
        init_rng = np.random.default_rng([seed, 2])
        policy = nn.GaussianPolicy.create(n_obs, 12, init_rng, cfg.hidden, in_scale=scale,
                                          offset=model.stance_targets,
                                          init_log_std=cfg.init_log_std)
        value = nn.Regressor.create(n_obs, init_rng, cfg.hidden, in_scale=scale)
        pol_adam = nn.AdamState.zeros(policy.params.size, cfg.learning_rate)
        val_adam = nn.AdamState.zeros(value.params.size, cfg.learning_rate)
        rngs = action_rngs(seed, cfg.num_envs)
        upd_rng = np.random.default_rng([seed, 3])
        env.reset()
        start = 0
        open(metrics_path, "w").close()
        _save_checkpoint(out_dir, TrainState(0, policy, value, pol_adam, val_adam, env.get_state(),
                                             [r.bit_generator.state for r in rngs],
                                             upd_rng.bit_generator.state), meta)
    else:
        policy, pol_adam, _ = nn.load_checkpoint(os.path.join(resume_from, "policy.bin"))
        value, val_adam, _ = nn.load_checkpoint(os.path.join(resume_from, "value.bin"))
        with open(os.path.join(resume_from, "train_state.pkl"), "rb") as fh:
            saved = pickle.load(fh)
        start = saved["iteration"]
        env.set_state(saved["env_state"])
        rngs = action_rngs(seed, cfg.num_envs)
        for r, s in zip(rngs, saved["action_rng_states"]):
            r.bit_generator.state = s
        upd_rng = np.random.default_rng()
        upd_rng.bit_generator.state = saved["update_rng_state"]
        _truncate_metrics(metrics_path, start)
    if policy.net.sizes[0] != n_obs:
        raise ValueError("checkpoint observation width does not match the task layout")
    with open(os.path.join(out_dir, "obs_layout.json"), "w") as fh:
        json.dump(env.layout.manifest(), fh, indent=2)
    t0 = time.perf_counter()
    for it in range(start, cfg.iterations):
        batch = collect_rollout(env, policy, value, cfg.horizon, rngs)
        pol_adam, val_adam, stats = ppo_update(batch, policy, value, pol_adam, val_adam, cfg,
                                               upd_rng, learning_rate_at(cfg, it))
        rec = metrics_record(it, batch, stats)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        if progress is not None:
            progress(rec)
        done = it + 1
        if done % cfg.checkpoint_every == 0:
            _save_checkpoint(out_dir, TrainState(done, policy, value, pol_adam, val_adam,
                                                 env.get_state(),
                                                 [r.bit_generator.state for r in rngs],
                                                 upd_rng.bit_generator.state), meta)
    nn.save_checkpoint(os.path.join(out_dir, "policy.bin"), policy, pol_adam, meta)
    nn.save_checkpoint(os.path.join(out_dir, "value.bin"), value, val_adam, meta)
    env.close()
    logger.info("trained %d iterations in %.1f s", cfg.iterations - start, time.perf_counter() - t0)
    return policy, value


def _truncate_metrics(path, n_rows: int) -> None:
    rows = []
    if os.path.exists(path):
        with open(path) as fh:
            rows = [line for line in fh if line.strip()]
    with open(path, "w") as fh:
        fh.writelines(rows[:n_rows])


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def config_dict(cfg: PpoConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
