"""Packed parameter layout shared by the compiled and pure-Python kernels.

The Cython kernel mirrors these offsets as a ``cdef enum``; ``tests/test_backend.py``
checks that both agree.
"""

TOTAL_MASS = 0
GRAVITY = 1
INERTIA = 2  # 3x3 row-major, body frame
INERTIA_INV = 11
JOINT_INERTIA = 20  # 12
JOINT_DAMPING = 32  # 12
HIP_OFFSETS = 44  # 4x3
L_HIP = 56
L_THIGH = 57
L_SHANK = 58
JOINT_LO = 59  # 12
JOINT_HI = 71  # 12
FOOT_RADIUS = 83
KNEE_RADIUS = 84
BOX_HALF = 85  # 3
MU = 88
STIFFNESS = 89
DAMPING = 90
RELAX = 91
TORQUE_LIMIT = 92
SPEED_LIMIT = 93
N_PARAMS = 94

N_LEGS = 4
N_JOINTS = 12
N_POINTS = 16  # 4 feet, 4 knees, 8 base-box corners
N_SELF = 24  # 4 adjacent leg pairs x 4 sphere pairs, plus 8 sphere-in-box checks
FOOT0 = 0
KNEE0 = 4
CORNER0 = 8

CONTACT_ITERS = 10  # Gauss-Seidel sweeps over contacts per step
NEWTON_ITERS = 8  # steps for the friction-disk projection

# Adjacent leg pairs checked for sphere overlap (leg order LF, RF, LH, RH).
ADJACENT_PAIRS = ((0, 1), (2, 3), (0, 2), (1, 3))

LAYOUT = {
    name: value
    for name, value in dict(globals()).items()
    if name.isupper() and isinstance(value, int)
}
