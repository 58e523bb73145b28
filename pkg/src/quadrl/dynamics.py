"""Simplified quadruped rigid-body simulator.

Floating base with 12 revolute joints (abduction, hip flexion, knee flexion per leg, leg
order LF, RF, LH, RH), flat-ground soft contacts with a Coulomb friction cone, and a
fixed-step semi-implicit Euler integrator.

Leg link masses are lumped into the base (mass and inertia at the nominal stance) and
into a constant reflected inertia per joint. The resulting mass matrix is block-diagonal,
so contact forces act on the base at the contact point and on the joints through the
point Jacobian transpose. That keeps the contact and kinematic structure needed by the
cost terms without articulated-body dynamics.

Contacts are soft: the normal impulse is a backward-Euler spring-damper acting on the
predicted end-of-step penetration, and the tangential impulse minimizes slip inside the
Coulomb disk. Both are solved together with joint-limit impulses by projected
Gauss-Seidel on the post-force velocity, so a contact can remove energy but never add
it. Joint limits are enforced by impulses on the joint velocity; the final angle clamp
only absorbs round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _layout as L
from ._backend import kernel

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

LEG_NAMES = ("LF", "RF", "LH", "RH")
JOINT_NAMES = tuple(f"{leg}_{j}" for leg in LEG_NAMES for j in ("HAA", "HFE", "KFE"))
POINT_CLASS_FOOT = 0
POINT_CLASS_BODY = 1
POINT_CLASS_SELF = 2
SELF_ID_OFFSET = 100


def _default_hips():
    return np.array([[0.3, 0.15, 0.0], [0.3, -0.15, 0.0], [-0.3, 0.15, 0.0], [-0.3, -0.15, 0.0]])


def _default_limits():
    return np.array([[-0.75, 0.75], [-2.0, 2.0], [-2.7, 0.0]])


@dataclass
class RobotModel:
    """Robot parameters. SI units throughout.

    Defaults describe a light quadruped (15.4 kg) chosen so the default PD gains hold
    the nominal stance; they are configurable and not measurements of a real robot.

    Per-leg poses and 3x2 joint limits are written for the front legs. With
    ``hind_knees_forward`` the hind legs get the fore-aft mirror image (HFE and KFE
    negated), so knees point toward the body center on all four legs.
    """

    base_mass: float = 10.0
    base_inertia: np.ndarray = field(default_factory=lambda: np.diag([0.096, 0.43, 0.48]))
    link_masses: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.4, 0.15]))
    hip_offsets: np.ndarray = field(default_factory=_default_hips)
    link_lengths: np.ndarray = field(default_factory=lambda: np.array([0.08, 0.3, 0.3]))
    joint_limits: np.ndarray = field(default_factory=_default_limits)
    joint_speed_limit: float = 12.0
    torque_limit: float = 40.0
    friction_coeff: float = 0.8
    contact_stiffness: float = 1.0e5
    contact_damping: float = 2.0e3
    foot_radius: float = 0.03
    knee_radius: float = 0.04
    base_half_extents: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.15, 0.08]))
    joint_armature: float = 0.05
    joint_damping: float = 2.0
    contact_relaxation: float = 0.3
    gravity: float = 9.81
    hind_knees_forward: bool = True
    nominal_stance: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.6, -1.2]))
    sitting_pose: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.2, -2.4]))

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (list, tuple, np.ndarray)):
                setattr(self, f.name, np.array(value, dtype=float))
        limits = self.joint_limits
        if limits.shape == (3, 2):
            tiled = np.tile(limits, (4, 1))
            if self.hind_knees_forward:
                for j in (7, 8, 10, 11):
                    tiled[j] = 0.0 - tiled[j, ::-1]
            self.joint_limits = tiled
        self.validate()

    def validate(self) -> None:
        if self.base_mass <= 0 or np.any(self.link_masses <= 0):
            raise ValueError("all masses must be positive")
        inertia = self.base_inertia
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T):
            raise ValueError("base_inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ValueError("base_inertia must be positive definite")
        if self.hip_offsets.shape != (4, 3):
            raise ValueError("hip_offsets must be 4x3")
        if self.link_lengths.shape != (3,) or np.any(self.link_lengths <= 0):
            raise ValueError("link_lengths must be three positive lengths")
        if self.joint_limits.shape != (12, 2):
            raise ValueError("joint_limits must be 12x2 (or 3x2 applied to every leg)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint_limits need lo < hi for every joint")
        positive = (
            "joint_speed_limit torque_limit contact_stiffness foot_radius knee_radius "
            "joint_armature contact_relaxation gravity"
        ).split()
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.friction_coeff < 0 or self.contact_damping < 0 or self.joint_damping < 0:
            raise ValueError("friction_coeff, contact_damping and joint_damping must be >= 0")

    # -- derived quantities -------------------------------------------------------

    @property
    def total_mass(self) -> float:
        return float(self.base_mass + 4 * self.link_masses.sum())

    def _nominal_link_points(self):
        """Per-leg body-frame positions of the lumped hip/thigh/shank masses."""
        pos, _ = kernel_py_points(self.pack(lumped=False), self.stance_targets)
        out = []
        for leg in range(4):
            side = 1.0 if leg % 2 == 0 else -1.0
            hip = self.hip_offsets[leg]
            hfe = hip + np.array([0.0, side * self.link_lengths[0], 0.0])
            knee, foot = pos[L.KNEE0 + leg], pos[L.FOOT0 + leg]
            out.append((hip + 0.5 * (hfe - hip), 0.5 * (hfe + knee), 0.5 * (knee + foot)))
        return out

    def body_inertia(self) -> np.ndarray:
        inertia = self.base_inertia.copy()
        for points in self._nominal_link_points():
            for m, r in zip(self.link_masses, points):
                inertia += m * (np.dot(r, r) * np.eye(3) - np.outer(r, r))
        return inertia

    def joint_inertias(self) -> np.ndarray:
        _, m_th, m_sh = self.link_masses
        out = np.empty(12)
        for leg, (_, thigh_c, shank_c) in enumerate(self._nominal_link_points()):
            hip = self.hip_offsets[leg]
            side = 1.0 if leg % 2 == 0 else -1.0
            hfe = hip + np.array([0.0, side * self.link_lengths[0], 0.0])

            def yz(r):
                d = r - hip
                return d[1] ** 2 + d[2] ** 2

            knee = 2 * thigh_c - hfe
            out[3 * leg] = m_th * yz(thigh_c) + m_sh * yz(shank_c)
            out[3 * leg + 1] = (
                m_th * np.sum((thigh_c - hfe) ** 2) + m_sh * np.sum((shank_c - hfe) ** 2)
            )
            out[3 * leg + 2] = m_sh * np.sum((shank_c - knee) ** 2)
        return out + self.joint_armature

    def pack(self, lumped: bool = True) -> np.ndarray:
        """Flatten into the kernel parameter vector (see ``_layout``)."""
        p = np.zeros(L.N_PARAMS)
        p[L.GRAVITY] = self.gravity
        p[L.HIP_OFFSETS : L.HIP_OFFSETS + 12] = self.hip_offsets.ravel()
        p[L.L_HIP], p[L.L_THIGH], p[L.L_SHANK] = self.link_lengths
        p[L.JOINT_LO : L.JOINT_LO + 12] = self.joint_limits[:, 0]
        p[L.JOINT_HI : L.JOINT_HI + 12] = self.joint_limits[:, 1]
        p[L.FOOT_RADIUS] = self.foot_radius
        p[L.KNEE_RADIUS] = self.knee_radius
        p[L.BOX_HALF : L.BOX_HALF + 3] = self.base_half_extents
        p[L.MU] = self.friction_coeff
        p[L.STIFFNESS] = self.contact_stiffness
        p[L.DAMPING] = self.contact_damping
        p[L.RELAX] = self.contact_relaxation
        p[L.TORQUE_LIMIT] = self.torque_limit
        p[L.SPEED_LIMIT] = self.joint_speed_limit
        if lumped:
            inertia = self.body_inertia()
            p[L.TOTAL_MASS] = self.total_mass
            p[L.INERTIA : L.INERTIA + 9] = inertia.ravel()
            p[L.INERTIA_INV : L.INERTIA_INV + 9] = np.linalg.inv(inertia).ravel()
            p[L.JOINT_INERTIA : L.JOINT_INERTIA + 12] = self.joint_inertias()
            p[L.JOINT_DAMPING : L.JOINT_DAMPING + 12] = self.joint_damping
        return p

    def __setattr__(self, name, value):
        self.__dict__.pop("_packed", None)
        super().__setattr__(name, value)

    @property
    def params(self) -> np.ndarray:
        """Packed kernel parameters, cached until a field is reassigned."""
        cached = self.__dict__.get("_packed")
        if cached is None:
            cached = self.__dict__["_packed"] = self.pack()
        return cached

    def leg_pose(self, pose) -> np.ndarray:
        """12 joint angles from a front-leg pose (3 values); 12 values pass through."""
        pose = np.asarray(pose, dtype=float)
        if pose.shape == (12,):
            return pose.copy()
        if pose.shape != (3,):
            raise ValueError(f"pose needs 3 or 12 joint angles, got shape {pose.shape}")
        out = np.tile(pose, 4)
        if self.hind_knees_forward:
            out[[7, 8, 10, 11]] *= -1.0
        return out

    @property
    def stance_targets(self) -> np.ndarray:
        return self.leg_pose(self.nominal_stance)

    @property
    def sitting_targets(self) -> np.ndarray:
        return self.leg_pose(self.sitting_pose)

    def standing_height(self, joint_angles=None) -> float:
        """Base height with all feet touching flat ground, identity orientation."""
        phi = self.leg_pose(self.nominal_stance if joint_angles is None else joint_angles)
        pos, _ = kernel_py_points(self.params, phi)
        return float(self.foot_radius - pos[L.FOOT0 : L.FOOT0 + 4, 2].min())

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
        return out


def kernel_py_points(params, phi):
    from ._pykernel import body_points

    return body_points(params, np.asarray(phi, dtype=float))


MODEL_KEYS = tuple(f.name for f in fields(RobotModel))


def model_from_dict(data: dict) -> RobotModel:
    unknown = set(data) - set(MODEL_KEYS)
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    return RobotModel(**data)


def load_model(path) -> RobotModel:
    """Load a robot model from a TOML key-value file.

    Keys are the :class:`RobotModel` field names, either at top level or under a
    ``[model]`` table. Missing keys keep their defaults; unknown keys are errors.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    return model_from_dict(data)


@dataclass
class GeneralizedState:
    """Generalized coordinates ``q`` (19) and velocities ``u`` (18).

    ``q`` = base position (world, 3) + orientation quaternion (w, x, y, z) + 12 joint
    angles. ``u`` = base linear velocity (body, 3) + base angular velocity (body, 3) + 12
    joint velocities.
    """

    q: np.ndarray
    u: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()
        self.u = np.asarray(self.u, dtype=float).copy()
        if self.q.shape != (19,) or self.u.shape != (18,):
            raise ValueError(f"state must be q[19], u[18]; got {self.q.shape}, {self.u.shape}")

    @classmethod
    def from_parts(cls, position=(0, 0, 0), quat=(1, 0, 0, 0), joints=None,
                   lin_vel=(0, 0, 0), ang_vel=(0, 0, 0), joint_vel=None, time=0.0):
        joints = np.zeros(12) if joints is None else joints
        joint_vel = np.zeros(12) if joint_vel is None else joint_vel
        q = np.concatenate([position, quat, joints]).astype(float)
        u = np.concatenate([lin_vel, ang_vel, joint_vel]).astype(float)
        return cls(q, u, time)

    position = property(lambda self: self.q[0:3])
    quaternion = property(lambda self: self.q[3:7])
    joint_angles = property(lambda self: self.q[7:19])
    lin_vel = property(lambda self: self.u[0:3])
    ang_vel = property(lambda self: self.u[3:6])
    joint_vel = property(lambda self: self.u[6:18])

    def copy(self) -> GeneralizedState:
        return GeneralizedState(self.q, self.u, self.time)


@dataclass
class Contact:
    point_id: int
    kind: str  # "foot", "body" or "self"
    gap: float
    impulse: np.ndarray
    velocity: np.ndarray


@dataclass
class ContactReport:
    """Contact bookkeeping for one simulation step.

    Ground data (``raw_gap``, ``impulse``, ``position``, ``velocity``) covers the 16
    candidate points (0-3 feet, 4-7 knees, 8-15 base corners) on the configuration that
    produced the step's forces. ``self_flags`` holds the 24 self-collision checks on the
    resulting configuration.
    """

    raw_gap: np.ndarray
    impulse: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    self_flags: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.raw_gap <= 0.0

    @property
    def gap(self) -> np.ndarray:
        """Gap function: 0 for active contacts, the separation otherwise."""
        return np.maximum(self.raw_gap, 0.0)

    @property
    def penetration(self) -> np.ndarray:
        return np.maximum(-self.raw_gap, 0.0)

    @property
    def foot_positions(self) -> np.ndarray:
        return self.position[L.FOOT0 : L.FOOT0 + 4]

    @property
    def foot_velocities(self) -> np.ndarray:
        return self.velocity[L.FOOT0 : L.FOOT0 + 4]

    @property
    def foot_gaps(self) -> np.ndarray:
        return self.gap[L.FOOT0 : L.FOOT0 + 4]

    @property
    def contact_set(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def foot_contact_set(self) -> np.ndarray:
        return np.flatnonzero(self.active[: L.KNEE0])

    @property
    def self_collision_set(self) -> np.ndarray:
        return np.flatnonzero(self.self_flags) + SELF_ID_OFFSET

    @property
    def contacts(self) -> list[Contact]:
        out = []
        gap = self.gap
        for i in range(L.N_POINTS):
            kind = "foot" if i < L.KNEE0 else "body"
            out.append(Contact(i, kind, float(gap[i]), self.impulse[i], self.velocity[i]))
        for sid in self.self_collision_set:
            out.append(Contact(int(sid), "self", 0.0, np.zeros(3), np.zeros(3)))
        return out

    def to_dict(self) -> dict:
        return {
            "raw_gap": self.raw_gap.tolist(),
            "impulse": self.impulse.tolist(),
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "self_flags": [int(x) for x in self.self_flags],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ContactReport:
        return cls(
            np.array(data["raw_gap"], dtype=float),
            np.array(data["impulse"], dtype=float).reshape(L.N_POINTS, 3),
            np.array(data["position"], dtype=float).reshape(L.N_POINTS, 3),
            np.array(data["velocity"], dtype=float).reshape(L.N_POINTS, 3),
            np.array(data["self_flags"], dtype=bool),
        )


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {name}: {np.asarray(arr)!r}")


def step(model: RobotModel, state: GeneralizedState, torques, dt: float):
    """Advance one step of length ``dt``. Returns ``(new_state, ContactReport)``."""
    torques = np.asarray(torques, dtype=float)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if torques.shape != (12,):
        raise ValueError(f"torques must have 12 entries, got shape {torques.shape}")
    _check_finite("state.q", state.q)
    _check_finite("state.u", state.u)
    _check_finite("torques", torques)
    if np.any(np.abs(torques) > model.torque_limit + 1e-9):
        raise ValueError(f"torques exceed the {model.torque_limit} N*m limit")
    params = model.params
    q, u, gap, imp, pos, vel = kernel.step(params, state.q, state.u, torques, float(dt))
    flags = kernel.self_collisions(params, q[7:19])
    report = ContactReport(gap, imp, pos, vel, np.asarray(flags, dtype=bool))
    return GeneralizedState(q, u, state.time + dt), report


def foot_kinematics(model: RobotModel, state: GeneralizedState):
    """World-frame foot positions and velocities, each of shape (4, 3)."""
    pos, vel = kernel.contact_points(model.params, state.q, state.u)
    return np.asarray(pos)[L.FOOT0 : L.FOOT0 + 4], np.asarray(vel)[L.FOOT0 : L.FOOT0 + 4]


def rotation_matrix(quat) -> np.ndarray:
    from ._pykernel import quat_to_matrix

    return quat_to_matrix(np.asarray(quat, dtype=float))


def gravity_in_body(state: GeneralizedState) -> np.ndarray:
    """World down direction (0, 0, -1) expressed in the base frame."""
    return -rotation_matrix(state.quaternion)[2]


def base_height(state: GeneralizedState) -> float:
    return float(state.q[2])


def mechanical_energy(model: RobotModel, state: GeneralizedState) -> float:
    """Kinetic + gravitational + contact-spring energy of the lumped model."""
    p = model.params
    inertia = p[L.INERTIA : L.INERTIA + 9].reshape(3, 3)
    j_inertia = p[L.JOINT_INERTIA : L.JOINT_INERTIA + 12]
    v, w, dphi = state.u[0:3], state.u[3:6], state.u[6:18]
    kinetic = 0.5 * (model.total_mass * v @ v + w @ inertia @ w + j_inertia @ (dphi * dphi))
    potential = model.total_mass * model.gravity * state.q[2]
    pos, _ = kernel.contact_points(p, state.q, state.u)
    radii = np.zeros(L.N_POINTS)
    radii[:4], radii[4:8] = model.foot_radius, model.knee_radius
    pen = np.maximum(radii - np.asarray(pos)[:, 2], 0.0)
    return float(kinetic + potential + 0.5 * model.contact_stiffness * pen @ pen)


def random_quaternion(rng) -> np.ndarray:
    """Uniformly distributed unit quaternion (normalized 4-D Gaussian)."""
    qv = rng.standard_normal(4)
    qv /= np.linalg.norm(qv)
    return qv if qv[0] >= 0 else -qv


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def yaw_quaternion(yaw: float) -> np.ndarray:
    return quat_from_axis_angle((0.0, 0.0, 1.0), yaw)
