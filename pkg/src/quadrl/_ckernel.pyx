# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulation kernel.

Line-for-line port of ``_pykernel``; see that module for the conventions. Batched entry
points release the GIL so callers may split environments across threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fmod, M_PI

cnp.import_array()

cdef enum:
    TOTAL_MASS = 0
    GRAVITY = 1
    INERTIA = 2
    INERTIA_INV = 11
    JOINT_INERTIA = 20
    JOINT_DAMPING = 32
    HIP_OFFSETS = 44
    L_HIP = 56
    L_THIGH = 57
    L_SHANK = 58
    JOINT_LO = 59
    JOINT_HI = 71
    FOOT_RADIUS = 83
    KNEE_RADIUS = 84
    BOX_HALF = 85
    MU = 88
    STIFFNESS = 89
    DAMPING = 90
    RELAX = 91
    TORQUE_LIMIT = 92
    SPEED_LIMIT = 93
    N_PARAMS = 94
    N_POINTS = 16
    N_SELF = 24
    KNEE0 = 4
    CORNER0 = 8
    CONTACT_ITERS = 10
    NEWTON_ITERS = 8

LAYOUT = dict(
    TOTAL_MASS=TOTAL_MASS, GRAVITY=GRAVITY, INERTIA=INERTIA, INERTIA_INV=INERTIA_INV,
    JOINT_INERTIA=JOINT_INERTIA, JOINT_DAMPING=JOINT_DAMPING, HIP_OFFSETS=HIP_OFFSETS,
    L_HIP=L_HIP, L_THIGH=L_THIGH, L_SHANK=L_SHANK, JOINT_LO=JOINT_LO, JOINT_HI=JOINT_HI,
    FOOT_RADIUS=FOOT_RADIUS, KNEE_RADIUS=KNEE_RADIUS, BOX_HALF=BOX_HALF, MU=MU,
    STIFFNESS=STIFFNESS, DAMPING=DAMPING, RELAX=RELAX, TORQUE_LIMIT=TORQUE_LIMIT,
    SPEED_LIMIT=SPEED_LIMIT, N_PARAMS=N_PARAMS, N_POINTS=N_POINTS, N_SELF=N_SELF,
    KNEE0=KNEE0, CORNER0=CORNER0, CONTACT_ITERS=CONTACT_ITERS,
    NEWTON_ITERS=NEWTON_ITERS,
)

cdef double[8][3] CORNER_SIGNS = [
    [1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1],
    [-1, 1, 1], [-1, 1, -1], [-1, -1, 1], [-1, -1, -1],
]
# points whose predicted gap is below this enter the contact solve (m)
cdef double CONTACT_MARGIN = 0.002
cdef int[4][2] ADJACENT = [[0, 1], [2, 3], [0, 2], [1, 3]]


cdef inline void cross(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void quat_to_matrix(const double* qt, double* r) noexcept nogil:
    cdef double w = qt[0], x = qt[1], y = qt[2], z = qt[3]
    r[0] = 1 - 2 * (y * y + z * z)
    r[1] = 2 * (x * y - w * z)
    r[2] = 2 * (x * z + w * y)
    r[3] = 2 * (x * y + w * z)
    r[4] = 1 - 2 * (x * x + z * z)
    r[5] = 2 * (y * z - w * x)
    r[6] = 2 * (x * z - w * y)
    r[7] = 2 * (y * z + w * x)
    r[8] = 1 - 2 * (x * x + y * y)


cdef inline void matvec(const double* m, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = m[3 * i] * v[0] + m[3 * i + 1] * v[1] + m[3 * i + 2] * v[2]


cdef inline void matTvec(const double* m, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = m[i] * v[0] + m[3 + i] * v[1] + m[6 + i] * v[2]


cdef void body_points_c(const double* p, const double* phi, double* pos, double* jac) noexcept nogil:
    """pos: 16x3, jac: 16x3x3 (row-major [point][dim][joint])."""
    cdef int leg, i, d, k
    cdef double side, a0, a1, a2, c0, s0, l_hip, l_th, l_sh
    cdef double hfe[3]
    cdef double knee[3]
    cdef double foot[3]
    cdef double hfe_b[3]
    cdef double knee_b[3]
    cdef double foot_b[3]
    cdef double axis[3]
    cdef double rel[3]
    cdef double col[3]
    cdef const double* hip
    l_hip = p[L_HIP]
    l_th = p[L_THIGH]
    l_sh = p[L_SHANK]
    for i in range(N_POINTS * 9):
        jac[i] = 0.0
    for leg in range(4):
        side = 1.0 if leg % 2 == 0 else -1.0
        hip = p + HIP_OFFSETS + 3 * leg
        a0 = phi[3 * leg]
        a1 = phi[3 * leg + 1]
        a2 = phi[3 * leg + 2]
        c0 = cos(a0)
        s0 = sin(a0)
        hfe[0] = 0.0
        hfe[1] = side * l_hip
        hfe[2] = 0.0
        knee[0] = -l_th * sin(a1)
        knee[1] = side * l_hip
        knee[2] = -l_th * cos(a1)
        foot[0] = knee[0] - l_sh * sin(a1 + a2)
        foot[1] = side * l_hip
        foot[2] = knee[2] - l_sh * cos(a1 + a2)
        hfe_b[0] = hip[0] + hfe[0]
        hfe_b[1] = hip[1] + c0 * hfe[1] - s0 * hfe[2]
        hfe_b[2] = hip[2] + s0 * hfe[1] + c0 * hfe[2]
        knee_b[0] = hip[0] + knee[0]
        knee_b[1] = hip[1] + c0 * knee[1] - s0 * knee[2]
        knee_b[2] = hip[2] + s0 * knee[1] + c0 * knee[2]
        foot_b[0] = hip[0] + foot[0]
        foot_b[1] = hip[1] + c0 * foot[1] - s0 * foot[2]
        foot_b[2] = hip[2] + s0 * foot[1] + c0 * foot[2]
        axis[0] = 0.0
        axis[1] = c0
        axis[2] = s0
        # foot
        i = leg
        for d in range(3):
            pos[3 * i + d] = foot_b[d]
            rel[d] = foot_b[d] - hip[d]
        jac[9 * i + 0] = 0.0
        jac[9 * i + 3] = -rel[2]
        jac[9 * i + 6] = rel[1]
        for d in range(3):
            rel[d] = foot_b[d] - hfe_b[d]
        cross(axis, rel, col)
        for d in range(3):
            jac[9 * i + 3 * d + 1] = col[d]
            rel[d] = foot_b[d] - knee_b[d]
        cross(axis, rel, col)
        for d in range(3):
            jac[9 * i + 3 * d + 2] = col[d]
        # knee
        i = KNEE0 + leg
        for d in range(3):
            pos[3 * i + d] = knee_b[d]
            rel[d] = knee_b[d] - hip[d]
        jac[9 * i + 0] = 0.0
        jac[9 * i + 3] = -rel[2]
        jac[9 * i + 6] = rel[1]
        for d in range(3):
            rel[d] = knee_b[d] - hfe_b[d]
        cross(axis, rel, col)
        for d in range(3):
            jac[9 * i + 3 * d + 1] = col[d]
    for k in range(8):
        for d in range(3):
            pos[3 * (CORNER0 + k) + d] = CORNER_SIGNS[k][d] * p[BOX_HALF + d]


cdef inline double point_radius(const double* p, int i) noexcept nogil:
    if i < KNEE0:
        return p[FOOT_RADIUS]
    if i < CORNER0:
        return p[KNEE_RADIUS]
    return 0.0


cdef void point_velocity(const double* u, const double* pos_b, const double* jac, int i,
                         double* out) noexcept nogil:
    cdef int d, k, leg
    cdef double wxp[3]
    cross(u + 3, pos_b + 3 * i, wxp)
    for d in range(3):
        out[d] = u[d] + wxp[d]
    if i < CORNER0:
        leg = i % 4
        for d in range(3):
            for k in range(3):
                out[d] += jac[9 * i + 3 * d + k] * u[6 + 3 * leg + k]


cdef inline void friction_update(double* lam, double vt0, double vt1, const double* w,
                                 double limit, double* delta) noexcept nogil:
    """Projected Gauss-Seidel update of one tangential impulse (see _pykernel)."""
    cdef double b0 = w[0] * lam[0] + w[1] * lam[1] - vt0
    cdef double b1 = w[2] * lam[0] + w[3] * lam[1] - vt1
    cdef double det = w[0] * w[3] - w[1] * w[2]
    cdef double x0 = (w[3] * b0 - w[1] * b1) / det
    cdef double x1 = (w[0] * b1 - w[2] * b0) / det
    cdef double nu = 0.0
    cdef double a00, a11, n, m0, m1, dn
    cdef int it
    if x0 * x0 + x1 * x1 > limit * limit:
        if limit <= 0.0:
            x0 = 0.0
            x1 = 0.0
        else:
            for it in range(NEWTON_ITERS):
                a00 = w[0] + nu
                a11 = w[3] + nu
                det = a00 * a11 - w[1] * w[2]
                x0 = (a11 * b0 - w[1] * b1) / det
                x1 = (a00 * b1 - w[2] * b0) / det
                n = sqrt(x0 * x0 + x1 * x1)
                m0 = (a11 * x0 - w[1] * x1) / det
                m1 = (a00 * x1 - w[2] * x0) / det
                dn = -(x0 * m0 + x1 * m1) / n
                nu = nu - (1.0 / limit - 1.0 / n) * n * n / dn
            a00 = w[0] + nu
            a11 = w[3] + nu
            det = a00 * a11 - w[1] * w[2]
            x0 = (a11 * b0 - w[1] * b1) / det
            x1 = (a00 * b1 - w[2] * b0) / det
            n = sqrt(x0 * x0 + x1 * x1)
            x0 = x0 * limit / n
            x1 = x1 * limit / n
    delta[0] = x0 - lam[0]
    delta[1] = x1 - lam[1]
    lam[0] = x0
    lam[1] = x1


cdef void step_c(const double* p, const double* q, const double* u, const double* tau, double dt,
                 double* q_out, double* u_out, double* gap, double* imp, double* pos_w,
                 double* vel_w) noexcept nogil:
    """Line-for-line port of ``_pykernel.step``."""
    cdef double rot[9]
    cdef double rdq[9]
    cdef double pos_b[N_POINTS * 3]
    cdef double jac[N_POINTS * 9]
    cdef double g_w[3]
    cdef double vb[3]
    cdef double vw[3]
    cdef double tmp[3]
    cdef double fw[3]
    cdef double fb[3]
    cdef double px[9]
    cdef double wmat[9]
    cdef double wm2[9]
    cdef double wt2[4]
    cdef double iw[3]
    cdef double wg[3]
    cdef double dq[4]
    cdef double quat[4]
    cdef double mass = p[TOTAL_MASS]
    cdef double mu = p[MU]
    cdef double k = p[STIFFNESS]
    cdef double c = p[DAMPING]
    cdef double relax = p[RELAX]
    cdef double c_n, angle, half, sh, norm, s, e_old, e_new, wnn, new_n, dn, free, target
    cdef const double* inertia_inv = p + INERTIA_INV
    cdef int i, a, b, d, jj, leg, it, ci
    cdef bint has_leg
    # contact candidates: point index, world Delassus block, penetration, normal gain
    cdef int n_ct = 0
    cdef int ct_idx[N_POINTS]
    cdef double ct_w[N_POINTS * 9]
    cdef double ct_pen[N_POINTS]
    cdef double ct_b[N_POINTS]
    cdef double lam[N_POINTS * 2]
    cdef double pn[N_POINTS]
    cdef double v_lo[12]
    cdef double v_hi[12]
    cdef double limit_imp[12]

    quat_to_matrix(q + 3, rot)
    body_points_c(p, q + 7, pos_b, jac)

    for i in range(N_POINTS):
        has_leg = i < CORNER0
        leg = i % 4
        point_velocity(u, pos_b, jac, i, vb)
        matvec(rot, pos_b + 3 * i, tmp)
        for d in range(3):
            pos_w[3 * i + d] = q[d] + tmp[d]
            imp[3 * i + d] = 0.0
        matvec(rot, vb, vel_w + 3 * i)
        gap[i] = pos_w[3 * i + 2] - point_radius(p, i)
        if gap[i] + dt * vel_w[3 * i + 2] >= CONTACT_MARGIN:
            continue
        # Delassus block: I/m + [p]^T Iinv [p] + sum_k J_k J_k^T / I_k   (body frame)
        px[0] = 0.0
        px[1] = -pos_b[3 * i + 2]
        px[2] = pos_b[3 * i + 1]
        px[3] = pos_b[3 * i + 2]
        px[4] = 0.0
        px[5] = -pos_b[3 * i]
        px[6] = -pos_b[3 * i + 1]
        px[7] = pos_b[3 * i]
        px[8] = 0.0
        for a in range(3):
            for b in range(3):
                s = 0.0
                for d in range(3):
                    s += inertia_inv[3 * a + d] * px[3 * d + b]
                wm2[3 * a + b] = s
        for a in range(3):
            for b in range(3):
                s = 1.0 / mass if a == b else 0.0
                for d in range(3):
                    s += px[3 * d + a] * wm2[3 * d + b]
                if has_leg:
                    for jj in range(3):
                        s += jac[9 * i + 3 * a + jj] * jac[9 * i + 3 * b + jj] / p[JOINT_INERTIA + 3 * leg + jj]
                wmat[3 * a + b] = s
        # world frame: R W R^T
        for a in range(3):
            for b in range(3):
                s = 0.0
                for d in range(3):
                    s += wmat[3 * a + d] * rot[3 * b + d]
                wm2[3 * a + b] = s
        for a in range(3):
            for b in range(3):
                s = 0.0
                for d in range(3):
                    s += rot[3 * a + d] * wm2[3 * d + b]
                ct_w[9 * n_ct + 3 * a + b] = s
        c_n = 0.0
        if gap[i] < 0.0:
            c_n = relax / (ct_w[9 * n_ct + 8] * dt)
            if c < c_n:
                c_n = c
        ct_idx[n_ct] = i
        ct_pen[n_ct] = -gap[i]
        ct_b[n_ct] = c_n + dt * k
        lam[2 * n_ct] = 0.0
        lam[2 * n_ct + 1] = 0.0
        pn[n_ct] = 0.0
        n_ct += 1

    # smooth update; linear velocity stays in the start-of-step body frame
    g_w[0] = 0.0
    g_w[1] = 0.0
    g_w[2] = -p[GRAVITY]
    matTvec(rot, g_w, tmp)
    for d in range(3):
        u_out[d] = u[d] + dt * tmp[d]
    matvec(p + INERTIA, u + 3, iw)
    cross(u + 3, iw, tmp)
    matvec(inertia_inv, tmp, iw)
    for d in range(3):
        wg[d] = u[3 + d] - dt * iw[d]
    matvec(p + INERTIA, u + 3, iw)
    e_old = u[3] * iw[0] + u[4] * iw[1] + u[5] * iw[2]
    matvec(p + INERTIA, wg, iw)
    e_new = wg[0] * iw[0] + wg[1] * iw[1] + wg[2] * iw[2]
    s = sqrt(e_old / e_new) if e_new > 0.0 else 1.0
    for d in range(3):
        u_out[3 + d] = wg[d] * s
    for jj in range(12):
        u_out[6 + jj] = u[6 + jj] + dt * (tau[jj] - p[JOINT_DAMPING + jj] * u[6 + jj]) / p[JOINT_INERTIA + jj]
        v_lo[jj] = (p[JOINT_LO + jj] - q[7 + jj]) / dt
        v_hi[jj] = (p[JOINT_HI + jj] - q[7 + jj]) / dt
        limit_imp[jj] = 0.0

    for it in range(CONTACT_ITERS):
        for ci in range(n_ct):
            i = ct_idx[ci]
            leg = i % 4
            point_velocity(u_out, pos_b, jac, i, vb)
            matvec(rot, vb, vw)
            wnn = ct_w[9 * ci + 8]
            new_n = dt * (k * ct_pen[ci] - ct_b[ci] * (vw[2] - wnn * pn[ci])) / (1.0 + dt * ct_b[ci] * wnn)
            if new_n < 0.0:
                new_n = 0.0
            dn = new_n - pn[ci]
            pn[ci] = new_n
            wt2[0] = ct_w[9 * ci]
            wt2[1] = ct_w[9 * ci + 1]
            wt2[2] = ct_w[9 * ci + 3]
            wt2[3] = ct_w[9 * ci + 4]
            friction_update(lam + 2 * ci, vw[0] + ct_w[9 * ci + 2] * dn, vw[1] + ct_w[9 * ci + 5] * dn,
                            wt2, mu * new_n, fw)
            fw[2] = dn
            matTvec(rot, fw, fb)
            cross(pos_b + 3 * i, fb, tmp)
            matvec(inertia_inv, tmp, iw)
            for d in range(3):
                u_out[d] += fb[d] / mass
                u_out[3 + d] += iw[d]
            if i < CORNER0:
                for jj in range(3):
                    s = 0.0
                    for d in range(3):
                        s += jac[9 * i + 3 * d + jj] * fb[d]
                    u_out[6 + 3 * leg + jj] += s / p[JOINT_INERTIA + 3 * leg + jj]
        for jj in range(12):
            free = u_out[6 + jj] - limit_imp[jj] / p[JOINT_INERTIA + jj]
            target = free
            if target < v_lo[jj]:
                target = v_lo[jj]
            if target > v_hi[jj]:
                target = v_hi[jj]
            limit_imp[jj] = (target - free) * p[JOINT_INERTIA + jj]
            u_out[6 + jj] = target
    for ci in range(n_ct):
        imp[3 * ct_idx[ci]] = lam[2 * ci]
        imp[3 * ct_idx[ci] + 1] = lam[2 * ci + 1]
        imp[3 * ct_idx[ci] + 2] = pn[ci]

    matvec(rot, u_out, tmp)
    for d in range(3):
        q_out[d] = q[d] + dt * tmp[d]
    angle = sqrt(u_out[3] * u_out[3] + u_out[4] * u_out[4] + u_out[5] * u_out[5]) * dt
    if angle > 0.0:
        half = 0.5 * angle
        sh = sin(half)
        dq[0] = cos(half)
        for d in range(3):
            dq[1 + d] = sh * (u_out[3 + d] * dt / angle)
    else:
        dq[0] = 1.0
        dq[1] = 0.0
        dq[2] = 0.0
        dq[3] = 0.0
    quat[0] = q[3] * dq[0] - q[4] * dq[1] - q[5] * dq[2] - q[6] * dq[3]
    quat[1] = q[3] * dq[1] + q[4] * dq[0] + q[5] * dq[3] - q[6] * dq[2]
    quat[2] = q[3] * dq[2] - q[4] * dq[3] + q[5] * dq[0] + q[6] * dq[1]
    quat[3] = q[3] * dq[3] + q[4] * dq[2] - q[5] * dq[1] + q[6] * dq[0]
    norm = sqrt(quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3])
    for d in range(4):
        q_out[3 + d] = quat[d] / norm
    quat_to_matrix(dq, rdq)
    for d in range(3):
        tmp[d] = u_out[d]
    matTvec(rdq, tmp, u_out)
    # the limit impulses already bound the angle; the clip only absorbs roundoff
    for jj in range(12):
        s = q[7 + jj] + dt * u_out[6 + jj]
        if s < p[JOINT_LO + jj]:
            s = p[JOINT_LO + jj]
        if s > p[JOINT_HI + jj]:
            s = p[JOINT_HI + jj]
        q_out[7 + jj] = s


cdef inline double wrap_angle(double x) noexcept nogil:
    cdef double r = fmod(x + M_PI, 2.0 * M_PI)
    if r < 0.0:
        r += 2.0 * M_PI
    return r - M_PI


cdef void pd_simulate_c(const double* p, double* q, double* u, const double* target,
                        double kp, double kd, int n_sub, double dt, double* tau, double* gap,
                        double* imp, double* pos, double* vel) noexcept nogil:
    cdef double qn[19]
    cdef double un[18]
    cdef double tmax = p[TORQUE_LIMIT]
    cdef double t
    cdef int n, j
    for n in range(n_sub):
        for j in range(12):
            t = kp * wrap_angle(target[j] - q[7 + j]) - kd * u[6 + j]
            if t > tmax:
                t = tmax
            elif t < -tmax:
                t = -tmax
            tau[j] = t
        step_c(p, q, u, tau, dt, qn, un, gap, imp, pos, vel)
        for j in range(19):
            q[j] = qn[j]
        for j in range(18):
            u[j] = un[j]


def body_points(double[::1] params, double[::1] phi):
    pos = np.zeros((N_POINTS, 3))
    jac = np.zeros((N_POINTS, 3, 3))
    cdef double[:, ::1] pv = pos
    cdef double[:, :, ::1] jv = jac
    body_points_c(&params[0], &phi[0], &pv[0, 0], &jv[0, 0, 0])
    return pos, jac


def contact_points(double[::1] params, double[::1] q, double[::1] u):
    cdef double rot[9]
    cdef double pos_b[N_POINTS * 3]
    cdef double jac[N_POINTS * 9]
    cdef double vb[3]
    cdef double tmp[3]
    cdef int i, d
    pos = np.empty((N_POINTS, 3))
    vel = np.empty((N_POINTS, 3))
    cdef double[:, ::1] pv = pos
    cdef double[:, ::1] vv = vel
    quat_to_matrix(&q[3], rot)
    body_points_c(&params[0], &q[7], pos_b, jac)
    for i in range(N_POINTS):
        point_velocity(&u[0], pos_b, jac, i, vb)
        matvec(rot, pos_b + 3 * i, tmp)
        for d in range(3):
            pv[i, d] = q[d] + tmp[d]
        matvec(rot, vb, &vv[i, 0])
    return pos, vel


def step(double[::1] params, double[::1] q, double[::1] u, double[::1] tau, double dt):
    q_new = np.empty(19)
    u_new = np.empty(18)
    gap = np.empty(N_POINTS)
    imp = np.empty((N_POINTS, 3))
    pos = np.empty((N_POINTS, 3))
    vel = np.empty((N_POINTS, 3))
    cdef double[::1] qv = q_new, uv = u_new, gv = gap
    cdef double[:, ::1] iv = imp, pv = pos, vv = vel
    step_c(&params[0], &q[0], &u[0], &tau[0], dt, &qv[0], &uv[0], &gv[0], &iv[0, 0],
           &pv[0, 0], &vv[0, 0])
    return q_new, u_new, gap, imp, pos, vel


def pd_torque(double kp, double kd, double tau_max, target, phi, dphi):
    err = np.remainder(np.asarray(target) - phi + np.pi, 2.0 * np.pi) - np.pi
    return np.clip(kp * err - kd * np.asarray(dphi), -tau_max, tau_max)


def pd_simulate(double[::1] params, q, u, double[::1] target, double kp, double kd, int n_sub,
                double dt):
    qc = np.array(q, dtype=np.float64)
    uc = np.array(u, dtype=np.float64)
    tau = np.empty(12)
    gap = np.empty(N_POINTS)
    imp = np.empty((N_POINTS, 3))
    pos = np.empty((N_POINTS, 3))
    vel = np.empty((N_POINTS, 3))
    cdef double[::1] qv = qc, uv = uc, tv = tau, gv = gap
    cdef double[:, ::1] iv = imp, pv = pos, vv = vel
    pd_simulate_c(&params[0], &qv[0], &uv[0], &target[0], kp, kd, n_sub, dt, &tv[0], &gv[0],
                  &iv[0, 0], &pv[0, 0], &vv[0, 0])
    return qc, uc, tau, gap, imp, pos, vel


def pd_simulate_batch(double[::1] params, double[:, ::1] qs, double[:, ::1] us,
                      double[:, ::1] targets, double kp, double kd, int n_sub, double dt):
    cdef Py_ssize_t n = qs.shape[0]
    cdef Py_ssize_t e
    tau = np.zeros((n, 12))
    gap = np.zeros((n, N_POINTS))
    imp = np.zeros((n, N_POINTS, 3))
    pos = np.zeros((n, N_POINTS, 3))
    vel = np.zeros((n, N_POINTS, 3))
    cdef double[:, ::1] tv = tau, gv = gap
    cdef double[:, :, ::1] iv = imp, pv = pos, vv = vel
    with nogil:
        for e in range(n):
            pd_simulate_c(&params[0], &qs[e, 0], &us[e, 0], &targets[e, 0], kp, kd, n_sub, dt,
                          &tv[e, 0], &gv[e, 0], &iv[e, 0, 0], &pv[e, 0, 0], &vv[e, 0, 0])
    return tau, gap, imp, pos, vel


cdef void self_collisions_c(const double* p, const double* phi, unsigned char* out) noexcept nogil:
    cdef double pos[N_POINTS * 3]
    cdef double jac[N_POINTS * 9]
    cdef int n = 0, pair, ia, ib, sa, sb, leg, d, i
    cdef double ra, rb, dist2, diff, closest, r
    body_points_c(p, phi, pos, jac)
    for pair in range(4):
        for sa in range(2):
            ia = KNEE0 + ADJACENT[pair][0] if sa == 0 else ADJACENT[pair][0]
            ra = p[KNEE_RADIUS] if sa == 0 else p[FOOT_RADIUS]
            for sb in range(2):
                ib = KNEE0 + ADJACENT[pair][1] if sb == 0 else ADJACENT[pair][1]
                rb = p[KNEE_RADIUS] if sb == 0 else p[FOOT_RADIUS]
                dist2 = 0.0
                for d in range(3):
                    diff = pos[3 * ia + d] - pos[3 * ib + d]
                    dist2 += diff * diff
                out[n] = dist2 < (ra + rb) * (ra + rb)
                n += 1
    for sa in range(2):
        for leg in range(4):
            i = KNEE0 + leg if sa == 0 else leg
            r = p[KNEE_RADIUS] if sa == 0 else p[FOOT_RADIUS]
            dist2 = 0.0
            for d in range(3):
                closest = pos[3 * i + d]
                if closest > p[BOX_HALF + d]:
                    closest = p[BOX_HALF + d]
                elif closest < -p[BOX_HALF + d]:
                    closest = -p[BOX_HALF + d]
                diff = pos[3 * i + d] - closest
                dist2 += diff * diff
            out[n] = dist2 < r * r
            n += 1


def self_collisions(double[::1] params, double[::1] phi):
    out = np.zeros(N_SELF, dtype=np.uint8)
    cdef unsigned char[::1] ov = out
    self_collisions_c(&params[0], &phi[0], &ov[0])
    return out.astype(bool)


def self_collisions_batch(double[::1] params, double[:, ::1] qs):
    cdef Py_ssize_t n = qs.shape[0], e
    out = np.zeros((n, N_SELF), dtype=np.uint8)
    cdef unsigned char[:, ::1] ov = out
    with nogil:
        for e in range(n):
            self_collisions_c(&params[0], &qs[e, 7], &ov[e, 0])
    return out.astype(bool)
