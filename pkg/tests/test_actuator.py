import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadrl.actuator import ActuatorConfig, pd_torque, shortest_angle
from quadrl.dynamics import GeneralizedState

finite = st.floats(-50.0, 50.0, allow_nan=False)


def state_with(phi, dphi):
    return GeneralizedState.from_parts(quat=(1, 0, 0, 0), joints=phi, joint_vel=dphi)


def test_defaults():
    cfg = ActuatorConfig()
    assert (cfg.kp, cfg.kd, cfg.tau_max) == (50.0, 0.4, 40.0)


@pytest.mark.parametrize("kw", [dict(kp=0.0), dict(kd=-0.1), dict(tau_max=0.0)])
def test_rejects_bad_gains(kw):
    with pytest.raises(ValueError):
        ActuatorConfig(**kw)


def test_hand_values():
    cfg = ActuatorConfig()
    phi = np.zeros(12)
    dphi = np.zeros(12)
    target = np.zeros(12)
    target[0] = 0.1
    dphi[1] = 2.0
    target[2] = 3.0
    tau = pd_torque(cfg, target, state_with(phi, dphi))
    assert tau[0] == pytest.approx(5.0)
    assert tau[1] == pytest.approx(-0.8)
    assert tau[2] == 40.0  # 150 saturates
    assert np.all(tau[3:] == 0.0)


def test_wraps_error():
    cfg = ActuatorConfig()
    phi = np.full(12, math.pi - 0.05)
    target = np.full(12, -math.pi + 0.05)
    tau = pd_torque(cfg, target, state_with(phi, np.zeros(12)))
    np.testing.assert_allclose(tau, 50.0 * 0.1, rtol=1e-9)


def test_rejects_bad_target():
    cfg = ActuatorConfig()
    with pytest.raises(ValueError):
        pd_torque(cfg, np.zeros(11), state_with(np.zeros(12), np.zeros(12)))
    with pytest.raises(ValueError):
        pd_torque(cfg, np.full(12, np.inf), state_with(np.zeros(12), np.zeros(12)))


@given(st.lists(finite, min_size=12, max_size=12), st.lists(finite, min_size=12, max_size=12),
       st.lists(finite, min_size=12, max_size=12))
def test_saturation_bound(target, phi, dphi):
    tau = pd_torque(ActuatorConfig(), np.array(target), state_with(np.array(phi), np.array(dphi)))
    assert np.all(np.abs(tau) <= 40.0)


@given(st.floats(-100, 100, allow_nan=False))
def test_shortest_angle_range(x):
    y = shortest_angle(x)
    assert -math.pi <= y < math.pi
    assert math.isclose(math.remainder(y - x, 2 * math.pi), 0.0, abs_tol=1e-9)
