"""Pure-Python (numpy) simulation kernel.

Reference implementation of the hot loop. The compiled ``_ckernel`` module exposes the
same functions with the same argument conventions; :mod:`quadrl._backend` picks one at
import time.

All arrays are float64. ``params`` is the packed vector described in
:mod:`quadrl._layout`. Point index convention: 0-3 feet, 4-7 knees, 8-15 base-box
corners.
"""

import math

import numpy as np

from . import _layout as L

_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (1.0, -1.0) for sy in (1.0, -1.0) for sz in (1.0, -1.0)]
)


def quat_to_matrix(quat):
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def body_points(params, phi):
    """Body-frame candidate points and their joint Jacobians.

    Returns ``(pos, jac)`` with ``pos`` of shape (16, 3) and ``jac`` of shape (16, 3, 3);
    ``jac[i, :, k]`` is the derivative of point ``i`` with respect to joint ``k`` of its
    own leg (zero for the base corners).
    """
    pos = np.zeros((L.N_POINTS, 3))
    jac = np.zeros((L.N_POINTS, 3, 3))
    l_hip, l_th, l_sh = params[L.L_HIP], params[L.L_THIGH], params[L.L_SHANK]
    for leg in range(L.N_LEGS):
        side = 1.0 if leg % 2 == 0 else -1.0
        hip = params[L.HIP_OFFSETS + 3 * leg : L.HIP_OFFSETS + 3 * leg + 3]
        a0, a1, a2 = phi[3 * leg : 3 * leg + 3]
        c0, s0 = math.cos(a0), math.sin(a0)
        # leg-plane coordinates before the abduction rotation (x, y, z)
        hfe = (0.0, side * l_hip, 0.0)
        knee = (-l_th * math.sin(a1), side * l_hip, -l_th * math.cos(a1))
        foot = (
            knee[0] - l_sh * math.sin(a1 + a2),
            side * l_hip,
            knee[2] - l_sh * math.cos(a1 + a2),
        )

        def to_body(v):
            return np.array(
                [hip[0] + v[0], hip[1] + c0 * v[1] - s0 * v[2], hip[2] + s0 * v[1] + c0 * v[2]]
            )

        hfe_b, knee_b, foot_b = to_body(hfe), to_body(knee), to_body(foot)
        axis_y = np.array([0.0, c0, s0])
        for idx, p, chain in ((L.FOOT0 + leg, foot_b, 3), (L.KNEE0 + leg, knee_b, 2)):
            pos[idx] = p
            r = p - hip
            jac[idx, :, 0] = (0.0, -r[2], r[1])
            jac[idx, :, 1] = _cross(axis_y, p - hfe_b)
            if chain == 3:
                jac[idx, :, 2] = _cross(axis_y, p - knee_b)
    half = params[L.BOX_HALF : L.BOX_HALF + 3]
    pos[L.CORNER0 :] = _CORNER_SIGNS * half
    return pos, jac


def _radii(params):
    r = np.zeros(L.N_POINTS)
    r[L.FOOT0 : L.FOOT0 + 4] = params[L.FOOT_RADIUS]
    r[L.KNEE0 : L.KNEE0 + 4] = params[L.KNEE_RADIUS]
    return r


def contact_points(params, q, u):
    """World positions and velocities of all 16 candidate points, shape (16, 3) each."""
    rot = quat_to_matrix(q[3:7])
    pos_b, jac = body_points(params, q[7:19])
    v, w, dphi = u[0:3], u[3:6], u[6:18]
    vel_b = np.empty_like(pos_b)
    for i in range(L.N_POINTS):
        vel_b[i] = v + _cross(w, pos_b[i])
        if i < L.CORNER0:
            leg = i % 4
            vel_b[i] += jac[i] @ dphi[3 * leg : 3 * leg + 3]
    return q[0:3] + pos_b @ rot.T, vel_b @ rot.T


# points whose predicted gap is below this enter the contact solve (m)
CONTACT_MARGIN = 0.002


def _friction_update(lam, vt, w, limit):
    """One projected Gauss-Seidel update of a tangential impulse.

    Minimizes the kinetic energy ``1/2 (x - x*)^T W (x - x*)`` over the friction disk
    ``|x| <= limit``, where ``x*`` is the impulse that stops the slip. Outside the disk
    the minimizer solves ``(W + nu I) x = W x*`` with ``|x| = limit``; ``nu`` comes from
    a few Newton steps on ``1/limit - 1/|x(nu)|``.
    """
    b0 = w[0, 0] * lam[0] + w[0, 1] * lam[1] - vt[0]
    b1 = w[1, 0] * lam[0] + w[1, 1] * lam[1] - vt[1]
    det = w[0, 0] * w[1, 1] - w[0, 1] * w[1, 0]
    x0 = (w[1, 1] * b0 - w[0, 1] * b1) / det
    x1 = (w[0, 0] * b1 - w[1, 0] * b0) / det
    if x0 * x0 + x1 * x1 <= limit * limit:
        return np.array([x0, x1])
    if limit <= 0.0:
        return np.zeros(2)
    nu = 0.0
    for _ in range(L.NEWTON_ITERS):
        a00 = w[0, 0] + nu
        a11 = w[1, 1] + nu
        det = a00 * a11 - w[0, 1] * w[1, 0]
        x0 = (a11 * b0 - w[0, 1] * b1) / det
        x1 = (a00 * b1 - w[1, 0] * b0) / det
        n = math.sqrt(x0 * x0 + x1 * x1)
        m0 = (a11 * x0 - w[0, 1] * x1) / det
        m1 = (a00 * x1 - w[1, 0] * x0) / det
        dn = -(x0 * m0 + x1 * m1) / n
        nu = nu - (1.0 / limit - 1.0 / n) * n * n / dn
    a00 = w[0, 0] + nu
    a11 = w[1, 1] + nu
    det = a00 * a11 - w[0, 1] * w[1, 0]
    x0 = (a11 * b0 - w[0, 1] * b1) / det
    x1 = (a00 * b1 - w[1, 0] * b0) / det
    n = math.sqrt(x0 * x0 + x1 * x1)
    return np.array([x0 * limit / n, x1 * limit / n])


def step(params, q, u, tau, dt):
    """One semi-implicit Euler step with soft normal contacts and Coulomb friction.

    Contact impulses are solved by projected Gauss-Seidel on the velocity after the
    smooth forces. The normal impulse is the backward-Euler spring-damper
    ``dt * max(k * pen - (c_n + dt * k) * v_n, 0)`` evaluated at the end-of-step normal
    velocity, i.e. the spring acts on the predicted end-of-step penetration. Points that
    are about to touch down are included, so contact never injects energy. The tangential impulse
    then minimizes the slip inside the friction disk ``mu * p_n``.

    Returns ``(q_new, u_new, gap, impulse, pos, vel)`` where the contact quantities are
    evaluated on the configuration at the start of the step. ``gap`` is the raw signed gap
    (negative while penetrating) and ``impulse`` rows are world ``(t_x, t_y, n)``.
    """
    mass = params[L.TOTAL_MASS]
    grav = params[L.GRAVITY]
    inertia = params[L.INERTIA : L.INERTIA + 9].reshape(3, 3)
    inertia_inv = params[L.INERTIA_INV : L.INERTIA_INV + 9].reshape(3, 3)
    joint_inertia = params[L.JOINT_INERTIA : L.JOINT_INERTIA + 12]
    joint_damping = params[L.JOINT_DAMPING : L.JOINT_DAMPING + 12]
    mu, k, c, relax = params[L.MU], params[L.STIFFNESS], params[L.DAMPING], params[L.RELAX]

    rot = quat_to_matrix(q[3:7])
    v, w, dphi = u[0:3], u[3:6], u[6:18]
    pos_b, jac = body_points(params, q[7:19])
    radii = _radii(params)

    gap = np.empty(L.N_POINTS)
    impulse = np.zeros((L.N_POINTS, 3))
    pos_w = np.empty((L.N_POINTS, 3))
    vel_w = np.empty((L.N_POINTS, 3))
    contacts = []

    for i in range(L.N_POINTS):
        p = pos_b[i]
        vb = v + _cross(w, p)
        has_leg = i < L.CORNER0
        leg = i % 4
        jl = jac[i] if has_leg else None
        if has_leg:
            vb = vb + jl @ dphi[3 * leg : 3 * leg + 3]
        pw = q[0:3] + rot @ p
        pos_w[i] = pw
        vel_w[i] = rot @ vb
        gap[i] = pw[2] - radii[i]
        if gap[i] + dt * vel_w[i, 2] >= CONTACT_MARGIN:
            continue
        # point Delassus block J M^-1 J^T in the body frame
        px = np.array([[0.0, -p[2], p[1]], [p[2], 0.0, -p[0]], [-p[1], p[0], 0.0]])
        wmat = np.eye(3) / mass + px.T @ inertia_inv @ px
        if has_leg:
            wmat = wmat + (jl / joint_inertia[3 * leg : 3 * leg + 3]) @ jl.T
        wmat = rot @ wmat @ rot.T
        c_n = min(c, relax / (wmat[2, 2] * dt)) if gap[i] < 0.0 else 0.0
        contacts.append((i, p, leg if has_leg else -1, jl, wmat, -gap[i], c_n + dt * k))

    # linear velocity is kept in the start-of-step body frame until the final rotation;
    # the gyroscopic update is rescaled so it cannot change the rotational energy
    u_new = np.empty(18)
    u_new[0:3] = v + dt * (rot.T @ np.array([0.0, 0.0, -grav]))
    wg = w - dt * (inertia_inv @ _cross(w, inertia @ w))
    e_old = w @ inertia @ w
    e_new = wg @ inertia @ wg
    u_new[3:6] = wg * math.sqrt(e_old / e_new) if e_new > 0.0 else wg
    u_new[6:18] = dphi + dt * (tau - joint_damping * dphi) / joint_inertia

    lam = np.zeros((len(contacts), 2))
    pn = np.zeros(len(contacts))
    lo = params[L.JOINT_LO : L.JOINT_LO + 12]
    hi = params[L.JOINT_HI : L.JOINT_HI + 12]
    # joint-limit impulses keep the end-of-step angle inside [lo, hi]
    v_lo = (lo - q[7:19]) / dt
    v_hi = (hi - q[7:19]) / dt
    limit_imp = np.zeros(12)
    for _ in range(L.CONTACT_ITERS):
        for ci, (i, p, leg, jl, wmat, pen, b) in enumerate(contacts):
            vb = u_new[0:3] + _cross(u_new[3:6], p)
            if leg >= 0:
                vb = vb + jl @ u_new[6 + 3 * leg : 9 + 3 * leg]
            vw = rot @ vb
            wnn = wmat[2, 2]
            new_n = dt * (k * pen - b * (vw[2] - wnn * pn[ci])) / (1.0 + dt * b * wnn)
            new_n = max(new_n, 0.0)
            dn = new_n - pn[ci]
            pn[ci] = new_n
            vt = vw[0:2] + wmat[0:2, 2] * dn
            new_t = _friction_update(lam[ci], vt, wmat[0:2, 0:2], mu * new_n)
            dt_x, dt_y = new_t - lam[ci]
            lam[ci] = new_t
            pb = rot.T @ np.array([dt_x, dt_y, dn])
            u_new[0:3] += pb / mass
            u_new[3:6] += inertia_inv @ _cross(p, pb)
            if leg >= 0:
                sl = slice(6 + 3 * leg, 9 + 3 * leg)
                u_new[sl] += (jl.T @ pb) / joint_inertia[3 * leg : 3 * leg + 3]
        for j in range(12):
            free = u_new[6 + j] - limit_imp[j] / joint_inertia[j]
            target = min(max(free, v_lo[j]), v_hi[j])
            limit_imp[j] = (target - free) * joint_inertia[j]
            u_new[6 + j] = target
    for ci, entry in enumerate(contacts):
        impulse[entry[0], 0:2] = lam[ci]
        impulse[entry[0], 2] = pn[ci]

    q_new = np.empty(19)
    q_new[0:3] = q[0:3] + dt * (rot @ u_new[0:3])
    wn = u_new[3:6]
    angle = math.sqrt(wn @ wn) * dt
    if angle > 0.0:
        axis = wn * dt / angle
        half = 0.5 * angle
        dq = np.array([math.cos(half), *(math.sin(half) * axis)])
    else:
        dq = np.array([1.0, 0.0, 0.0, 0.0])
    quat = _quat_mul(q[3:7], dq)
    q_new[3:7] = quat / math.sqrt(quat @ quat)
    u_new[0:3] = quat_to_matrix(dq).T @ u_new[0:3]
    # the limit impulses already bound the angle; the clip only absorbs roundoff
    q_new[7:19] = np.minimum(np.maximum(q[7:19] + dt * u_new[6:18], lo), hi)
    return q_new, u_new, gap, impulse, pos_w, vel_w


def pd_torque(kp, kd, tau_max, target, phi, dphi):
    err = np.remainder(target - phi + math.pi, 2.0 * math.pi) - math.pi
    return np.clip(kp * err - kd * dphi, -tau_max, tau_max)


def pd_simulate(params, q, u, target, kp, kd, n_sub, dt):
    """Run ``n_sub`` steps with PD torques recomputed every step.

    Returns ``(q, u, tau, gap, impulse, pos, vel)``; torque and contact data come from the
    last sub-step.
    """
    tau_max = params[L.TORQUE_LIMIT]
    for _ in range(n_sub):
        tau = pd_torque(kp, kd, tau_max, target, q[7:19], u[6:18])
        q, u, gap, imp, pos, vel = step(params, q, u, tau, dt)
    return q, u, tau, gap, imp, pos, vel


def pd_simulate_batch(params, qs, us, targets, kp, kd, n_sub, dt):
    """Batched :func:`pd_simulate`; ``qs`` and ``us`` are updated in place.

    Returns ``(tau, gap, impulse, pos, vel)`` with a leading batch axis.
    """
    n = qs.shape[0]
    tau = np.zeros((n, 12))
    gap = np.zeros((n, L.N_POINTS))
    imp = np.zeros((n, L.N_POINTS, 3))
    pos = np.zeros((n, L.N_POINTS, 3))
    vel = np.zeros((n, L.N_POINTS, 3))
    for e in range(n):
        qe, ue, tau[e], gap[e], imp[e], pos[e], vel[e] = pd_simulate(
            params, qs[e], us[e], targets[e], kp, kd, n_sub, dt
        )
        qs[e] = qe
        us[e] = ue
    return tau, gap, imp, pos, vel


def self_collisions(params, phi):
    """Boolean flags for the 24 self-collision checks.

    Entries 0-15: sphere overlap for each adjacent leg pair in ``ADJACENT_PAIRS`` and each
    (knee|foot, knee|foot) combination. Entries 16-23: knee/foot sphere of leg ``i``
    intersecting the base box (knees 16-19, feet 20-23).
    """
    pos, _ = body_points(params, phi)
    rf, rk = params[L.FOOT_RADIUS], params[L.KNEE_RADIUS]
    half = params[L.BOX_HALF : L.BOX_HALF + 3]
    out = np.zeros(L.N_SELF, dtype=bool)
    n = 0
    for a, b in L.ADJACENT_PAIRS:
        for ia, ra in ((L.KNEE0 + a, rk), (L.FOOT0 + a, rf)):
            for ib, rb in ((L.KNEE0 + b, rk), (L.FOOT0 + b, rf)):
                d = pos[ia] - pos[ib]
                out[n] = d @ d < (ra + rb) ** 2
                n += 1
    for i, r in [(L.KNEE0 + leg, rk) for leg in range(4)] + [(L.FOOT0 + leg, rf) for leg in range(4)]:
        # sphere-box overlap via the closest point on the box
        closest = np.clip(pos[i], -half, half)
        d = pos[i] - closest
        out[n] = d @ d < r * r
        n += 1
    return out


def self_collisions_batch(params, qs):
    return np.array([self_collisions(params, q[7:19]) for q in qs]).reshape(len(qs), L.N_SELF)
