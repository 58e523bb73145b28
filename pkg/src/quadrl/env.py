"""MDP layer: observations, cost terms, task rewards, commands and episode lifecycle.

Single-state functions (:func:`compute_cost_terms`, :func:`build_observation`, ...) define
the semantics; :class:`VecEnv` runs ``E`` environments in lock-step through the batched
kernel and reuses the same batched helpers.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from . import _layout as KL
from ._backend import kernel
from .actuator import ActuatorConfig, shortest_angle
from .dynamics import ContactReport, GeneralizedState, RobotModel, random_quaternion, yaw_quaternion

HEIGHT_THRESHOLD = 0.35
FOOT_CLEARANCE = 0.07
MIN_SPEED, MAX_SPEED = 0.4, 1.2

COST_NAMES = (
    "angular_velocity",
    "linear_velocity",
    "height",
    "joint_position",
    "orientation",
    "torque",
    "power",
    "joint_acceleration",
    "joint_speed",
    "body_impulse",
    "body_slippage",
    "foot_slippage",
    "foot_clearance",
    "self_collision",
    "action_difference",
)
COST_INDEX = {name: i for i, name in enumerate(COST_NAMES)}


class TaskKind(str, Enum):
    SELF_RIGHTING = "self_righting"
    STANDING_UP = "standing_up"
    LOCOMOTION = "locomotion"
    SELECTOR = "selector"


HEIGHT_ESTIMATOR = "height_estimator"

# Shipped reward weights. These are tuning choices for this simulator, not published
# values. Tracking kernels are negative (the kernel is most negative at zero error), the
# remaining terms are penalties.
DEFAULT_WEIGHTS = {
    TaskKind.SELF_RIGHTING: dict(
        angular_velocity=-1.0, linear_velocity=-1.0, height=0.0, joint_position=-0.05,
        orientation=-0.5, torque=-2e-5, power=-1e-3, joint_acceleration=-2e-6,
        joint_speed=-0.01, body_impulse=0.0, body_slippage=-0.05, foot_slippage=0.0,
        foot_clearance=0.0, self_collision=-0.1, action_difference=-0.05,
    ),
    TaskKind.STANDING_UP: dict(
        angular_velocity=-3.0, linear_velocity=-3.0, height=-2.0, joint_position=-0.05,
        orientation=-1.0, torque=-1e-5, power=-2e-4, joint_acceleration=-2e-7,
        joint_speed=-0.01, body_impulse=-0.1, body_slippage=-0.05, foot_slippage=-0.05,
        foot_clearance=0.0, self_collision=-0.1, action_difference=-0.01,
    ),
    TaskKind.LOCOMOTION: dict(
        angular_velocity=-2.0, linear_velocity=-4.0, height=-1.0, joint_position=-0.02,
        orientation=-1.0, torque=-1e-5, power=-2e-4, joint_acceleration=-2e-7,
        joint_speed=-0.01, body_impulse=-0.1, body_slippage=-0.05, foot_slippage=-0.05,
        foot_clearance=-0.5, self_collision=-0.1, action_difference=-0.01,
    ),
    TaskKind.SELECTOR: dict(
        angular_velocity=-1.0, linear_velocity=-2.0, height=-1.0, joint_position=0.0,
        orientation=-1.0, torque=-1e-5, power=-5e-4, joint_acceleration=0.0,
        joint_speed=-0.01, body_impulse=-0.5, body_slippage=-0.05, foot_slippage=-0.05,
        foot_clearance=0.0, self_collision=-0.1, action_difference=0.0,
    ),
}

DEFAULT_EPISODE_LENGTH = {
    TaskKind.SELF_RIGHTING: 400,
    TaskKind.STANDING_UP: 400,
    TaskKind.LOCOMOTION: 400,
    TaskKind.SELECTOR: 800,
}


# -- cost terms -------------------------------------------------------------------


@dataclass(frozen=True)
class CostVector:
    angular_velocity: float
    linear_velocity: float
    height: float
    joint_position: float
    orientation: float
    torque: float
    power: float
    joint_acceleration: float
    joint_speed: float
    body_impulse: float
    body_slippage: float
    foot_slippage: float
    foot_clearance: float
    self_collision: float
    action_difference: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in COST_NAMES])

    @classmethod
    def from_array(cls, arr) -> CostVector:
        arr = np.asarray(arr, dtype=float)
        return cls(*(float(x) for x in arr))

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in COST_NAMES}


def angle_diff(a, b):
    """Minimum angular distance between ``a`` and ``b``, in [0, pi]."""
    return np.abs(shortest_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def kernel_K(x, alpha: float):
    """Logistic kernel ``-1 / (exp(a|x|) + 2 + exp(-a|x|))`` of the error norm.

    ``x`` is a vector (or a batch of vectors along the last axis). Ranges in [-1/4, 0).
    """
    if not alpha > 0:
        raise ValueError(f"kernel alpha must be positive, got {alpha}")
    n = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    e = np.exp(-alpha * n)
    return -e / (1.0 + e) ** 2


def gravity_batch(q):
    """e_g for a batch of configurations, shape (E, 3)."""
    w, x, y, z = q[:, 3], q[:, 4], q[:, 5], q[:, 6]
    return -np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1)


def cost_terms_batch(q, u, raw_gap, impulse, point_pos, point_vel, self_flags, tau,
                     prev_joint_vel, action, prev_action, command, joint_target, *,
                     control_dt, speed_limit, alpha_ang=1.0, alpha_lin=1.0):
    """All 15 cost terms for a batch, shape (E, 15). Argument shapes carry a leading E."""
    n = q.shape[0]
    out = np.empty((n, len(COST_NAMES)))
    w_target = np.zeros((n, 3))
    w_target[:, 2] = command[:, 2]
    v_target = np.zeros((n, 3))
    v_target[:, :2] = command[:, :2]
    out[:, 0] = kernel_K(u[:, 3:6] - w_target, alpha_ang)
    out[:, 1] = kernel_K(u[:, 0:3] - v_target, alpha_lin)
    out[:, 2] = (q[:, 2] < HEIGHT_THRESHOLD).astype(float)
    out[:, 3] = angle_diff(q[:, 7:19], joint_target).sum(axis=1)
    out[:, 4] = np.linalg.norm(np.array([0.0, 0.0, -1.0]) - gravity_batch(q), axis=1)
    dphi = u[:, 6:18]
    out[:, 5] = np.sum(tau * tau, axis=1)
    out[:, 6] = np.sum(np.maximum(dphi * tau, 0.0), axis=1)
    acc = (dphi - prev_joint_vel) / control_dt
    out[:, 7] = np.sum(acc * acc, axis=1)
    out[:, 8] = np.sum(np.maximum(np.abs(dphi) - speed_limit, 0.0) ** 2, axis=1)

    active = raw_gap <= 0.0
    foot_active = active[:, : KL.KNEE0]
    body_active = active.copy()
    body_active[:, : KL.KNEE0] = False
    n_body = body_active.sum(axis=1)
    imp_norm = np.linalg.norm(impulse, axis=2)
    out[:, 9] = np.where(n_body > 0, (imp_norm * body_active).sum(axis=1) / np.maximum(n_body, 1), 0.0)
    n_active = active.sum(axis=1)
    vel_sq = np.sum(point_vel * point_vel, axis=2)
    out[:, 10] = np.where(n_active > 0, (vel_sq * active).sum(axis=1) / np.maximum(n_active, 1), 0.0)
    foot_speed = np.linalg.norm(point_vel[:, : KL.KNEE0], axis=2)
    out[:, 11] = (foot_speed * foot_active).sum(axis=1)
    clearance = (point_pos[:, : KL.KNEE0, 2] - FOOT_CLEARANCE) ** 2 * foot_speed
    out[:, 12] = (clearance * ~foot_active).sum(axis=1)
    out[:, 13] = self_flags.sum(axis=1)
    diff = prev_action - action
    out[:, 14] = np.sum(diff * diff, axis=1)
    return out


# -- tasks, commands, history -------------------------------------------------------


@dataclass
class Command:
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.yaw_rate])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def sample_command(rng, speed_range=(MIN_SPEED, MAX_SPEED), yaw_range=(-1.0, 1.0)) -> Command:
    """Planar speed uniform in ``speed_range``, heading uniform, yaw rate uniform."""
    speed = rng.uniform(*speed_range)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    yaw = rng.uniform(*yaw_range)
    return Command(speed * math.cos(heading), speed * math.sin(heading), yaw)


@dataclass
class Task:
    kind: TaskKind
    reward_weights: dict = field(default_factory=dict)
    episode_length: int = 0
    joint_target: np.ndarray | None = None
    terminate_on_body_contact: bool | None = None

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if not self.reward_weights:
            self.reward_weights = dict(DEFAULT_WEIGHTS[self.kind])
        missing = [n for n in COST_NAMES if n not in self.reward_weights]
        if missing:
            raise ValueError(f"reward weight missing for: {', '.join(missing)}")
        unknown = sorted(set(self.reward_weights) - set(COST_NAMES))
        if unknown:
            raise ValueError(f"unknown reward weight keys: {unknown}")
        if not all(math.isfinite(float(v)) for v in self.reward_weights.values()):
            raise ValueError("reward weights must be finite")
        if not self.episode_length:
            self.episode_length = DEFAULT_EPISODE_LENGTH[self.kind]
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        if self.terminate_on_body_contact is None:
            self.terminate_on_body_contact = self.kind == TaskKind.LOCOMOTION

    @property
    def weight_vector(self) -> np.ndarray:
        return np.array([float(self.reward_weights[n]) for n in COST_NAMES])

    def target_pose(self, model: RobotModel) -> np.ndarray:
        if self.joint_target is not None:
            return model.leg_pose(self.joint_target)
        if self.kind == TaskKind.SELF_RIGHTING:
            return model.sitting_targets
        return model.stance_targets

    @property
    def uses_command(self) -> bool:
        return self.kind in (TaskKind.LOCOMOTION, TaskKind.SELECTOR)


def task_reward(task: Task, costs) -> float:
    """Weighted sum of the cost terms."""
    arr = costs.as_array() if isinstance(costs, CostVector) else np.asarray(costs, dtype=float)
    return float(arr @ task.weight_vector)


class HistoryBuffer:
    """Joint position errors and velocities of the last ``capacity`` control steps.

    Row 0 is the newest entry. Also keeps the previous joint position targets.
    """

    def __init__(self, capacity: int = 2):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self.errors = np.zeros((capacity, 12))
        self.velocities = np.zeros((capacity, 12))
        self.prev_target = np.zeros(12)

    def push(self, error, velocity) -> None:
        self.errors = np.roll(self.errors, 1, axis=0)
        self.velocities = np.roll(self.velocities, 1, axis=0)
        self.errors[0] = error
        self.velocities[0] = velocity

    def flat(self) -> np.ndarray:
        return np.concatenate([self.errors, self.velocities], axis=1).ravel()

    def copy(self) -> HistoryBuffer:
        out = HistoryBuffer(self.capacity)
        out.errors, out.velocities = self.errors.copy(), self.velocities.copy()
        out.prev_target = self.prev_target.copy()
        return out


def compute_cost_terms(model: RobotModel, state: GeneralizedState, contacts: ContactReport,
                       tau, history: HistoryBuffer, action, prev_action, command: Command,
                       joint_target=None, control_dt: float = 0.01,
                       alpha_ang: float = 1.0, alpha_lin: float = 1.0) -> CostVector:
    """Table of cost terms for one control step.

    ``history`` must be the buffer from *before* this step; its newest velocity row is
    the previous joint velocity used for the finite-difference joint acceleration.
    """
    tau, action, prev_action = (np.asarray(x, dtype=float) for x in (tau, action, prev_action))
    for name, arr in (("tau", tau), ("action", action), ("prev_action", prev_action)):
        if arr.shape != (12,):
            raise ValueError(f"{name} must have 12 entries, got shape {arr.shape}")
    if joint_target is None:
        target = model.stance_targets
    else:
        target = np.asarray(joint_target, dtype=float)
        target = target if target.shape == (12,) else model.leg_pose(target)
    row = cost_terms_batch(
        state.q[None], state.u[None], contacts.raw_gap[None], contacts.impulse[None],
        contacts.position[None], contacts.velocity[None], contacts.self_flags[None],
        tau[None], history.velocities[0][None], action[None], prev_action[None],
        command.as_array()[None], target[None], control_dt=control_dt,
        speed_limit=model.joint_speed_limit, alpha_ang=alpha_ang, alpha_lin=alpha_lin,
    )[0]
    return CostVector.from_array(row)


# -- observations -------------------------------------------------------------------


class ObservationLayout:
    """Ordered named segments of a flat observation vector."""

    def __init__(self, kind: str, segments):
        self.kind = kind
        self.segments = tuple(segments)
        self.offsets = {}
        off = 0
        for name, size in self.segments:
            self.offsets[name] = (off, off + size)
            off += size
        self.size = off

    def slice(self, name: str) -> slice:
        lo, hi = self.offsets[name]
        return slice(lo, hi)

    def __contains__(self, name) -> bool:
        return name in self.offsets

    def __len__(self) -> int:
        return self.size

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "size": self.size,
            "segments": [
                {"name": n, "offset": self.offsets[n][0], "size": s} for n, s in self.segments
            ],
        }

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)


def observation_layout(kind, history_length: int = 2) -> ObservationLayout:
    hist = ("history", 24 * history_length)
    if kind == HEIGHT_ESTIMATOR:
        segs = [("gravity", 3), ("joint_pos", 12), ("joint_vel", 12), hist]
        return ObservationLayout(HEIGHT_ESTIMATOR, segs)
    kind = TaskKind(kind)
    segs = [("gravity", 3), ("ang_vel", 3), ("joint_pos", 12), ("joint_vel", 12), hist,
            ("prev_action", 12)]
    if kind != TaskKind.SELF_RIGHTING:
        segs.insert(0, ("lin_vel", 3))
    if kind in (TaskKind.LOCOMOTION, TaskKind.SELECTOR):
        segs += [("command", 3), ("height", 1)]
    if kind == TaskKind.SELECTOR:
        segs.append(("selector_prev", 3))
    return ObservationLayout(kind.value, segs)


def observation_scale(layout: ObservationLayout) -> np.ndarray:
    """Fixed per-entry input scaling applied before the networks."""
    scale = np.ones(layout.size)
    per_segment = {"ang_vel": 0.25, "joint_vel": 0.1, "lin_vel": 0.5, "height": 2.0}
    for name, value in per_segment.items():
        if name in layout:
            scale[layout.slice(name)] = value
    if "history" in layout:
        lo, hi = layout.offsets["history"]
        block = np.ones(hi - lo).reshape(-1, 24)
        block[:, 12:] = 0.1
        scale[lo:hi] = block.ravel()
    return scale


def _sensor_batch(q, u, hist_err, hist_vel, prev_action, command, height, selector_prev):
    n = q.shape[0]
    history = np.concatenate([hist_err, hist_vel], axis=2).reshape(n, -1)
    return {
        "lin_vel": u[:, 0:3],
        "gravity": gravity_batch(q),
        "ang_vel": u[:, 3:6],
        "joint_pos": q[:, 7:19],
        "joint_vel": u[:, 6:18],
        "history": history,
        "prev_action": prev_action,
        "command": command,
        "height": height.reshape(n, 1),
        "selector_prev": selector_prev,
    }


def assemble(layout: ObservationLayout, sensors: dict) -> np.ndarray:
    return np.concatenate([sensors[name] for name, _ in layout.segments], axis=1)


def project(obs, src: ObservationLayout, dst: ObservationLayout) -> np.ndarray:
    """Pick the ``dst`` segments out of observations laid out as ``src``."""
    obs = np.asarray(obs)
    parts = [obs[..., src.slice(name)] for name, _ in dst.segments]
    return np.concatenate(parts, axis=-1)


def build_observation(task: Task, state: GeneralizedState, history: HistoryBuffer,
                      command: Command | None = None, h_source=None,
                      prev_selector_action=None, kind=None) -> np.ndarray:
    """Flat observation for ``task`` (or for ``kind="height_estimator"``).

    ``h_source`` is required for locomotion and selector layouts: either ``"true"`` for
    the simulator height or a float estimate. It must be ``None`` otherwise.
    """
    kind = task.kind if kind is None else kind
    layout = observation_layout(kind, history.capacity)
    needs_height = "height" in layout
    if needs_height and h_source is None:
        raise ValueError(f"{layout.kind} observation needs a height source")
    if not needs_height and h_source is not None:
        raise ValueError(f"{layout.kind} observation takes no height source")
    if needs_height:
        if isinstance(h_source, str):
            if h_source != "true":
                raise ValueError(f"unknown height source {h_source!r}")
            height = state.q[2]
        else:
            height = float(h_source)
    else:
        height = 0.0
    command = Command() if command is None else command
    selector_prev = np.zeros(3) if prev_selector_action is None else np.asarray(prev_selector_action, float)
    sensors = _sensor_batch(
        state.q[None], state.u[None], history.errors[None], history.velocities[None],
        history.prev_target[None], command.as_array()[None], np.array([height]),
        selector_prev[None],
    )
    return assemble(layout, sensors)[0]


@dataclass(frozen=True)
class NoiseConfig:
    """Half-widths of the zero-mean uniform observation noise."""

    lin_vel: float = 0.2
    ang_vel: float = 0.25
    joint_vel: float = 0.5
    joint_pos: float = 0.05

    def amplitude_vector(self, layout: ObservationLayout) -> np.ndarray:
        amp = np.zeros(layout.size)
        for name in ("lin_vel", "ang_vel", "joint_vel", "joint_pos"):
            if name in layout:
                amp[layout.slice(name)] = getattr(self, name)
        return amp


def inject_noise(obs, layout: ObservationLayout, rng, noise: NoiseConfig = NoiseConfig()):
    """Add uniform noise in [-a, a] to the velocity and joint-position segments."""
    amp = noise.amplitude_vector(layout)
    mask = amp > 0
    out = np.array(obs, dtype=float, copy=True)
    out[..., mask] += amp[mask] * rng.uniform(-1.0, 1.0, size=out[..., mask].shape)
    return out


# -- resets and termination -----------------------------------------------------------


def _lift_to_ground(model: RobotModel, q, clearance: float = 0.0):
    """Set base height so the lowest candidate point sits ``clearance`` above ground."""
    q = q.copy()
    q[2] = 0.0
    pos, _ = kernel.contact_points(model.params, q, np.zeros(18))
    radii = np.zeros(KL.N_POINTS)
    radii[: KL.KNEE0] = model.foot_radius
    radii[KL.KNEE0 : KL.CORNER0] = model.knee_radius
    q[2] = clearance - np.min(np.asarray(pos)[:, 2] - radii)
    return q


def reset(task: Task, model: RobotModel, rng, history_length: int = 2):
    """Sample an initial state for ``task``. Returns ``(GeneralizedState, HistoryBuffer)``."""
    kind = task.kind
    if kind == TaskKind.SELECTOR:
        kind = (TaskKind.SELF_RIGHTING, TaskKind.STANDING_UP, TaskKind.LOCOMOTION)[rng.integers(3)]
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    q = np.zeros(19)
    if kind == TaskKind.SELF_RIGHTING:
        q[3:7] = random_quaternion(rng)
        q[7:19] = rng.uniform(lo, hi)
        q = _lift_to_ground(model, q, clearance=0.02)
    elif kind == TaskKind.STANDING_UP:
        q[3:7] = yaw_quaternion(rng.uniform(-math.pi, math.pi))
        q[7:19] = np.clip(model.sitting_targets + rng.uniform(-0.1, 0.1, 12), lo, hi)
        q = _lift_to_ground(model, q)
    else:
        q[3:7] = yaw_quaternion(rng.uniform(-math.pi, math.pi))
        q[7:19] = model.stance_targets
        q = _lift_to_ground(model, q)
    history = HistoryBuffer(history_length)
    history.prev_target = q[7:19].copy()
    return GeneralizedState(q, np.zeros(18)), history


def is_terminal(task: Task, state: GeneralizedState, steps: int = 0,
                contacts: ContactReport | None = None) -> bool:
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.u))):
        return True
    if steps >= task.episode_length:
        return True
    if task.terminate_on_body_contact and contacts is not None:
        return bool(np.any(contacts.active[KL.CORNER0 :]))
    return False


# -- vectorized environment -------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    history_length: int = 2
    sim_dt: float = 0.0025
    control_substeps: int = 4
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    add_noise: bool = True
    alpha_ang: float = 1.0
    alpha_lin: float = 1.0
    workers: int = 1

    @property
    def control_dt(self) -> float:
        return self.sim_dt * self.control_substeps

    def __post_init__(self):
        if self.history_length < 1 or self.control_substeps < 1 or not self.sim_dt > 0:
            raise ValueError("invalid environment timing/history configuration")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


ENV_KEYS = tuple(f.name for f in fields(EnvConfig))


@dataclass
class StepResult:
    obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    costs: np.ndarray
    tau: np.ndarray
    diverged: np.ndarray
    terminal_height: np.ndarray
    contacts: tuple
    final_q: np.ndarray | None = None
    final_u: np.ndarray | None = None


class VecEnv:
    """``num_envs`` independent environments stepped together.

    Every environment owns an RNG keyed by ``(seed, index)`` for resets, commands and
    observation noise, so results do not depend on ``config.workers``.
    """

    def __init__(self, model: RobotModel, actuator: ActuatorConfig, task: Task, num_envs: int,
                 seed: int, config: EnvConfig = EnvConfig()):
        self.model = model
        self.actuator = actuator
        self.task = task
        self.num_envs = num_envs
        self.config = config
        self.params = model.params
        self.layout = observation_layout(task.kind, config.history_length)
        self.full_layout = observation_layout(TaskKind.SELECTOR, config.history_length)
        self.he_layout = observation_layout(HEIGHT_ESTIMATOR, config.history_length)
        self.rngs = [np.random.default_rng([seed, e]) for e in range(num_envs)]
        self.joint_target = task.target_pose(model)
        self.weights = task.weight_vector
        self.noise_amp = config.noise.amplitude_vector(self.full_layout)
        self.noise_mask = self.noise_amp > 0
        self.height_estimates = None
        self.selector_prev = np.zeros((num_envs, 3))
        self.fixed_command = None
        self._pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
        n, h = num_envs, config.history_length
        self.q = np.zeros((n, 19))
        self.u = np.zeros((n, 18))
        self.hist_err = np.zeros((n, h, 12))
        self.hist_vel = np.zeros((n, h, 12))
        self.prev_action = np.zeros((n, 12))
        self.command = np.zeros((n, 3))
        self.steps = np.zeros(n, dtype=np.int64)
        self.time = np.zeros(n)
        self._noisy = None

    # state access

    def state(self, e: int) -> GeneralizedState:
        return GeneralizedState(self.q[e], self.u[e], float(self.time[e]))

    def history(self, e: int) -> HistoryBuffer:
        hb = HistoryBuffer(self.config.history_length)
        hb.errors, hb.velocities = self.hist_err[e].copy(), self.hist_vel[e].copy()
        hb.prev_target = self.prev_action[e].copy()
        return hb

    def get_state(self) -> dict:
        return {
            "q": self.q.copy(), "u": self.u.copy(), "hist_err": self.hist_err.copy(),
            "hist_vel": self.hist_vel.copy(), "prev_action": self.prev_action.copy(),
            "command": self.command.copy(), "steps": self.steps.copy(), "time": self.time.copy(),
            "selector_prev": self.selector_prev.copy(),
            "rngs": [r.bit_generator.state for r in self.rngs],
            "noisy": None if self._noisy is None else self._noisy.copy(),
        }

    def set_state(self, st: dict) -> None:
        for key in ("q", "u", "hist_err", "hist_vel", "prev_action", "command", "steps", "time",
                    "selector_prev"):
            setattr(self, key, np.array(st[key]))
        for r, s in zip(self.rngs, st["rngs"]):
            r.bit_generator.state = s
        self._noisy = None if st["noisy"] is None else np.array(st["noisy"])

    # lifecycle

    def _reset_env(self, e: int) -> None:
        rng = self.rngs[e]
        state, hist = reset(self.task, self.model, rng, self.config.history_length)
        self.q[e], self.u[e] = state.q, state.u
        self.hist_err[e], self.hist_vel[e] = hist.errors, hist.velocities
        self.prev_action[e] = hist.prev_target
        if self.fixed_command is not None:
            self.command[e] = self.fixed_command
        elif self.task.uses_command:
            self.command[e] = sample_command(rng).as_array()
        else:
            self.command[e] = 0.0
        self.steps[e] = 0
        self.time[e] = 0.0
        self.selector_prev[e] = 0.0

    def reset(self) -> np.ndarray:
        for e in range(self.num_envs):
            self._reset_env(e)
        self._observe()
        return self.observe()

    def true_heights(self) -> np.ndarray:
        return self.q[:, 2].copy()

    def _observe(self) -> None:
        """Assemble the full noisy observation for every env (one noise draw per env)."""
        height = self.true_heights() if self.height_estimates is None else self.height_estimates
        sensors = _sensor_batch(self.q, self.u, self.hist_err, self.hist_vel, self.prev_action,
                                self.command, np.asarray(height, dtype=float), self.selector_prev)
        full = assemble(self.full_layout, sensors)
        if self.config.add_noise:
            amp = self.noise_amp[self.noise_mask]
            for e in range(self.num_envs):
                full[e, self.noise_mask] += amp * self.rngs[e].uniform(-1.0, 1.0, amp.size)
        self._noisy = full

    def observe(self, kind=None) -> np.ndarray:
        """Current (noisy) observations in the task layout or another ``kind`` layout."""
        if kind is None:
            layout = self.layout
        elif kind == HEIGHT_ESTIMATOR:
            layout = self.he_layout
        else:
            layout = observation_layout(kind, self.config.history_length)
        return project(self._noisy, self.full_layout, layout)

    def set_height_estimates(self, heights) -> None:
        """Replace the height segment by estimates (``None`` restores the true height)."""
        self.height_estimates = None if heights is None else np.asarray(heights, dtype=float)
        if self._noisy is not None:
            h = self.true_heights() if heights is None else self.height_estimates
            self._noisy[:, self.full_layout.slice("height")] = np.asarray(h).reshape(-1, 1)

    def set_selector_action(self, one_hot_actions) -> None:
        """Record the selector's latest choice for the ``selector_prev`` segment."""
        self.selector_prev = np.array(one_hot_actions, dtype=float).reshape(self.num_envs, 3)
        if self._noisy is not None:
            self._noisy[:, self.full_layout.slice("selector_prev")] = self.selector_prev

    def _simulate(self, targets):
        cfg = self.config
        args = (self.actuator.kp, self.actuator.kd, cfg.control_substeps, cfg.sim_dt)
        if self._pool is None:
            return kernel.pd_simulate_batch(self.params, self.q, self.u, targets, *args)
        chunks = np.array_split(np.arange(self.num_envs), cfg.workers)
        jobs = [
            self._pool.submit(kernel.pd_simulate_batch, self.params, self.q[c[0] : c[-1] + 1],
                              self.u[c[0] : c[-1] + 1], targets[c[0] : c[-1] + 1], *args)
            for c in chunks if len(c)
        ]
        parts = [j.result() for j in jobs]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))

    def step(self, actions) -> StepResult:
        actions = np.ascontiguousarray(actions, dtype=float)
        if actions.shape != (self.num_envs, 12):
            raise ValueError(f"actions must be ({self.num_envs}, 12), got {actions.shape}")
        cfg = self.config
        # Non-finite targets would poison the kernel; hold the previous targets instead.
        bad = ~np.all(np.isfinite(actions), axis=1)
        if bad.any():
            actions = actions.copy()
            actions[bad] = self.prev_action[bad]
        prev_vel = self.hist_vel[:, 0].copy()
        tau, gap, imp, pos, vel = self._simulate(actions)
        q, u = self.q, self.u
        diverged = ~(np.all(np.isfinite(q), axis=1) & np.all(np.isfinite(u), axis=1))
        if diverged.any():
            q[diverged] = 0.0
            u[diverged] = 0.0
            for arr in (gap, imp, pos, vel, tau):
                arr[diverged] = 0.0
            q[diverged, 3] = 1.0
        flags = kernel.self_collisions_batch(self.params, q)
        costs = cost_terms_batch(
            q, u, gap, imp, pos, vel, flags, tau, prev_vel, actions, self.prev_action,
            self.command, self.joint_target[None], control_dt=cfg.control_dt,
            speed_limit=self.model.joint_speed_limit, alpha_ang=cfg.alpha_ang,
            alpha_lin=cfg.alpha_lin,
        )
        costs[diverged] = 0.0
        reward = costs @ self.weights
        self.hist_err = np.roll(self.hist_err, 1, axis=1)
        self.hist_vel = np.roll(self.hist_vel, 1, axis=1)
        self.hist_err[:, 0] = shortest_angle(actions - q[:, 7:19])
        self.hist_vel[:, 0] = u[:, 6:18]
        self.prev_action = actions.copy()
        self.steps += 1
        self.time += cfg.control_dt
        done = diverged | (self.steps >= self.task.episode_length)
        if self.task.terminate_on_body_contact:
            done |= np.any(gap[:, KL.CORNER0 :] <= 0.0, axis=1)
        final_q, final_u = q.copy(), u.copy()
        contacts = (gap, imp, pos, vel, flags)
        for e in np.flatnonzero(done):
            self._reset_env(e)
        self._observe()
        return StepResult(self.observe(), reward, done, costs, tau, diverged, final_q[:, 2].copy(),
                          contacts, final_q, final_u)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
