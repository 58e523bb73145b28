import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadrl import _layout as L
from quadrl import _pykernel
from quadrl._backend import NAME, kernel
from quadrl.dynamics import (GeneralizedState, RobotModel, base_height, foot_kinematics,
                             gravity_in_body, load_model, mechanical_energy, quat_from_axis_angle,
                             random_quaternion, rotation_matrix, step)
from quadrl.env import _lift_to_ground

DT = 0.0025


def random_state(model, rng, clearance=None):
    q = np.zeros(19)
    q[3:7] = random_quaternion(rng)
    q[7:19] = rng.uniform(model.joint_limits[:, 0], model.joint_limits[:, 1])
    q = _lift_to_ground(model, q, rng.uniform(-0.005, 0.02) if clearance is None else clearance)
    return GeneralizedState(q, rng.normal(size=18))


def stand(model, seconds=1.0):
    q = np.zeros(19)
    q[3] = 1.0
    q[7:19] = model.stance_targets
    s = GeneralizedState(_lift_to_ground(model, q), np.zeros(18))
    out = []
    for _ in range(int(round(seconds / DT))):
        err = model.stance_targets - s.joint_angles
        tau = np.clip(50.0 * err - 0.4 * s.joint_vel, -40, 40)
        s, rep = step(model, s, tau, DT)
        out.append((s, rep))
    return out


class TestModel:
    def test_defaults_consistent(self, model):
        assert model.total_mass == pytest.approx(15.4)
        assert model.joint_limits.shape == (12, 2)
        assert np.all(model.joint_limits[:, 0] < model.joint_limits[:, 1])
        assert model.params.shape == (L.N_PARAMS,)

    def test_hind_knees_mirrored(self, model):
        t = model.stance_targets
        np.testing.assert_array_equal(t[1:3], -t[7:9])
        np.testing.assert_array_equal(t[0:3], t[3:6])

    def test_rejects_bad_mass(self):
        with pytest.raises(ValueError):
            RobotModel(base_mass=-1.0)

    def test_load_model_roundtrip(self, tmp_path):
        path = tmp_path / "robot.toml"
        path.write_text("[model]\nbase_mass = 12.0\nfriction_coeff = 0.6\n")
        m = load_model(path)
        assert m.base_mass == 12.0 and m.friction_coeff == 0.6

    def test_load_model_unknown_key(self, tmp_path):
        path = tmp_path / "robot.toml"
        path.write_text("base_mas = 12.0\n")
        with pytest.raises(ValueError, match="base_mas"):
            load_model(path)

    def test_standing_height_matches_kinematics(self, model):
        q = np.zeros(19)
        q[3] = 1.0
        q[7:19] = model.stance_targets
        q[2] = model.standing_height()
        feet, _ = foot_kinematics(model, GeneralizedState(q, np.zeros(18)))
        np.testing.assert_allclose(feet[:, 2], model.foot_radius, atol=1e-12)


class TestState:
    def test_shape_checked(self):
        with pytest.raises(ValueError):
            GeneralizedState(np.zeros(18), np.zeros(18))

    def test_gravity_identity(self):
        s = GeneralizedState.from_parts(position=(0, 0, 1))
        np.testing.assert_allclose(gravity_in_body(s), [0, 0, -1])
        assert base_height(s) == 1.0

    def test_gravity_upside_down(self):
        s = GeneralizedState.from_parts(quat=quat_from_axis_angle((1, 0, 0), math.pi))
        np.testing.assert_allclose(gravity_in_body(s), [0, 0, 1], atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_rotation_orthonormal(self, seed):
        r = rotation_matrix(random_quaternion(np.random.default_rng(seed)))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


class TestStepInputs:
    def test_rejects_torque_above_limit(self, model):
        s = GeneralizedState.from_parts(position=(0, 0, 1), quat=(1, 0, 0, 0))
        with pytest.raises(ValueError, match="limit"):
            step(model, s, np.full(12, 41.0), DT)

    def test_rejects_nan(self, model):
        s = GeneralizedState.from_parts(position=(0, 0, 1), quat=(1, 0, 0, 0))
        tau = np.zeros(12)
        tau[3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            step(model, s, tau, DT)

    def test_rejects_bad_dt(self, model):
        s = GeneralizedState.from_parts(position=(0, 0, 1), quat=(1, 0, 0, 0))
        with pytest.raises(ValueError):
            step(model, s, np.zeros(12), 0.0)


class TestBallistic:
    @pytest.mark.parametrize("n", [1, 10, 200])
    def test_closed_form(self, model, n):
        z0, v0 = 5.0, np.array([0.3, -0.2, 1.5])
        s = GeneralizedState.from_parts(position=(0, 0, z0), quat=(1, 0, 0, 0),
                                        joints=model.stance_targets, lin_vel=v0)
        for _ in range(n):
            s, rep = step(model, s, np.zeros(12), DT)
        g = model.gravity
        # semi-implicit Euler: velocity first, then position with the new velocity
        vz = v0[2] - n * g * DT
        z = z0 + n * DT * v0[2] - g * DT * DT * n * (n + 1) / 2
        assert abs(s.u[2] - vz) < 1e-12
        assert abs(s.q[2] - z) < 1e-12
        np.testing.assert_allclose(s.q[:2], n * DT * v0[:2], atol=1e-12, rtol=0)
        assert not rep.active.any()
        np.testing.assert_array_equal(rep.impulse, 0.0)


class TestQuaternion:
    @given(st.integers(0, 2**32 - 1))
    def test_norm_drift_per_step(self, seed):
        model = RobotModel()
        rng = np.random.default_rng(seed)
        s = random_state(model, rng)
        s.u[3:6] = rng.normal(scale=5.0, size=3)
        for _ in range(20):
            tau = rng.uniform(-40, 40, 12)
            s, _ = step(model, s, tau, DT)
            assert abs(np.linalg.norm(s.quaternion) - 1.0) < 1e-9


class TestContact:
    def test_rest_penetration(self, model):
        traj = stand(model, 2.0)
        pen = max(float(np.max(rep.penetration[: L.KNEE0])) for _, rep in traj[400:])
        assert pen < 1e-3
        s = traj[-1][0]
        assert abs(s.q[2] - model.standing_height()) < 0.02
        assert np.linalg.norm(s.u[:3]) < 1e-3

    @given(st.integers(0, 2**32 - 1))
    def test_consistency(self, seed):
        model = RobotModel()
        rng = np.random.default_rng(seed)
        s = random_state(model, rng)
        for _ in range(5):
            s, rep = step(model, s, rng.uniform(-40, 40, 12), DT)
            assert np.all(rep.gap[rep.active] == 0.0)
            assert np.all(rep.impulse[:, 2] >= 0.0)
            tang = np.linalg.norm(rep.impulse[:, :2], axis=1)
            assert np.all(tang <= model.friction_coeff * rep.impulse[:, 2] + 1e-9)

    def test_contact_sets(self, model):
        s = GeneralizedState.from_parts(position=(0, 0, 5.0), quat=(1, 0, 0, 0))
        _, rep = step(model, s, np.zeros(12), DT)
        assert rep.contact_set.size == 0 and rep.foot_contact_set.size == 0
        assert [c.kind for c in rep.contacts[:5]] == ["foot"] * 4 + ["body"]

    def test_report_roundtrip(self, model, rng):
        _, rep = step(model, random_state(model, rng), np.zeros(12), DT)
        from quadrl.dynamics import ContactReport

        back = ContactReport.from_dict(rep.to_dict())
        for name in ("raw_gap", "impulse", "position", "velocity", "self_flags"):
            np.testing.assert_array_equal(getattr(back, name), getattr(rep, name))


class TestEnergy:
    # Tolerance: the energy may rise above its running minimum by at most
    # 1e-5 of the total energy dissipated over the drop (rotational linearization).
    REL_TOL = 1e-5

    @pytest.mark.parametrize("seed", range(6))
    def test_passive_drop_non_increasing(self, model, seed):
        rng = np.random.default_rng(seed)
        s = GeneralizedState.from_parts(position=(0, 0, 1.0), quat=random_quaternion(rng),
                                        joints=rng.uniform(model.joint_limits[:, 0],
                                                           model.joint_limits[:, 1]),
                                        ang_vel=rng.normal(size=3))
        energy = [mechanical_energy(model, s)]
        for _ in range(600):
            s, _ = step(model, s, np.zeros(12), DT)
            energy.append(mechanical_energy(model, s))
        energy = np.array(energy)
        rise = np.max(energy - np.minimum.accumulate(energy))
        assert energy[0] - energy.min() > 1.0
        assert rise <= self.REL_TOL * (energy[0] - energy.min())

    def test_free_flight_rotation_conserves_rotational_energy(self, model):
        s = GeneralizedState.from_parts(position=(0, 0, 50.0), quat=(1, 0, 0, 0),
                                        joints=model.stance_targets, ang_vel=(1.0, 2.0, -0.5))
        inertia = model.params[L.INERTIA : L.INERTIA + 9].reshape(3, 3)
        e0 = s.ang_vel @ inertia @ s.ang_vel
        for _ in range(200):
            s, _ = step(model, s, np.zeros(12), DT)
        assert s.ang_vel @ inertia @ s.ang_vel == pytest.approx(e0, rel=1e-12)


@pytest.mark.skipif(NAME != "cython", reason="compiled kernel not built")
class TestBackends:
    @given(st.integers(0, 2**32 - 1))
    def test_step_agrees(self, seed):
        model = RobotModel()
        rng = np.random.default_rng(seed)
        s = random_state(model, rng)
        target = rng.uniform(-1, 1, 12)
        a = _pykernel.pd_simulate(model.params, s.q.copy(), s.u.copy(), target, 50.0, 0.4, 4, DT)
        b = kernel.pd_simulate(model.params, s.q.copy(), s.u.copy(), target, 50.0, 0.4, 4, DT)
        for x, y in zip(a, b):
            np.testing.assert_allclose(np.asarray(y, float), np.asarray(x, float), atol=1e-10,
                                       rtol=0)

    def test_self_collisions_agree(self, model, rng):
        for _ in range(50):
            phi = rng.uniform(model.joint_limits[:, 0], model.joint_limits[:, 1])
            np.testing.assert_array_equal(np.asarray(kernel.self_collisions(model.params, phi)),
                                          np.asarray(_pykernel.self_collisions(model.params, phi)))

    def test_layouts_agree(self):
        assert {"N_PARAMS", "N_POINTS", "CONTACT_ITERS"} <= set(kernel.LAYOUT)
        for key, value in kernel.LAYOUT.items():
            assert L.LAYOUT[key] == value, key
