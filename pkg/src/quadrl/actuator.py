"""Analytic PD actuator with torque saturation.

Stands in for a learned actuator network: joint position targets and the current joint
state map to saturated joint torques. The joint-state history consumed by a learned model
is already assembled by :class:`quadrl.env.HistoryBuffer`, so a learned actuator can be
substituted behind :func:`pd_torque` without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import GeneralizedState


@dataclass(frozen=True)
class ActuatorConfig:
    kp: float = 50.0
    kd: float = 0.4
    tau_max: float = 40.0

    def __post_init__(self):
        if not self.kp > 0:
            raise ValueError(f"kp must be positive, got {self.kp}")
        if not self.kd >= 0:
            raise ValueError(f"kd must be non-negative, got {self.kd}")
        if not self.tau_max > 0:
            raise ValueError(f"tau_max must be positive, got {self.tau_max}")


def shortest_angle(delta):
    """Wrap an angle difference into [-pi, pi)."""
    return np.remainder(np.asarray(delta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def pd_torque(cfg: ActuatorConfig, target, state: GeneralizedState) -> np.ndarray:
    """``clamp(kp * (target - phi) - kd * dphi, -tau_max, tau_max)`` per joint."""
    target = np.asarray(target, dtype=float)
    if target.shape != (12,):
        raise ValueError(f"target must have 12 entries, got shape {target.shape}")
    if not np.all(np.isfinite(target)):
        raise ValueError(f"non-finite joint target: {target!r}")
    err = shortest_angle(target - state.joint_angles)
    return np.clip(cfg.kp * err - cfg.kd * state.joint_vel, -cfg.tau_max, cfg.tau_max)
