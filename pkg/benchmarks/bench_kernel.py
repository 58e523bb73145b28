"""Compare the compiled and numpy simulation kernels.

    python benchmarks/bench_kernel.py [--envs 16] [--steps 200] [--repeat 3]

Times ``pd_simulate_batch`` (one control step = 4 physics sub-steps per env) and the
single-step ``step`` call, and checks that both backends produce the same states.
"""

import argparse
import time

import numpy as np

from quadrl import _pykernel
from quadrl.dynamics import RobotModel
from quadrl.env import _lift_to_ground

try:
    from quadrl import _ckernel
except ImportError:
    _ckernel = None


def initial_states(model, n, rng):
    qs = np.zeros((n, 19))
    for e in range(n):
        q = np.zeros(19)
        q[3] = 1.0
        q[7:19] = model.stance_targets + rng.uniform(-0.2, 0.2, 12)
        qs[e] = _lift_to_ground(model, q, 0.01)
    return qs, np.zeros((n, 18))


def time_batch(kernel, model, n_envs, steps, seed):
    rng = np.random.default_rng(seed)
    qs, us = initial_states(model, n_envs, rng)
    targets = model.stance_targets + rng.uniform(-0.3, 0.3, (steps, n_envs, 12))
    start = time.perf_counter()
    for t in range(steps):
        kernel.pd_simulate_batch(model.params, qs, us, targets[t], 80.0, 2.0, 4, 0.0025)
    return time.perf_counter() - start, qs, us


def time_step(kernel, model, n):
    q = np.zeros(19)
    q[3] = 1.0
    q[7:19] = model.stance_targets
    q = _lift_to_ground(model, q, 0.0)
    u = np.zeros(18)
    tau = np.zeros(12)
    start = time.perf_counter()
    for _ in range(n):
        q, u = kernel.step(model.params, q, u, tau, 0.0025)[:2]
    return time.perf_counter() - start


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--envs", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    model = RobotModel()
    backends = [("python", _pykernel)]
    if _ckernel is not None:
        backends.append(("cython", _ckernel))
    else:
        print("compiled kernel not built; timing the numpy fallback only")

    results = {}
    for name, kern in backends:
        best = min(time_batch(kern, model, args.envs, args.steps, 0)[0] for _ in range(args.repeat))
        single = min(time_step(kern, model, 2000) for _ in range(args.repeat))
        results[name] = (best, single)
        ctrl = args.envs * args.steps / best
        print(f"{name:>7}: {best:8.3f}s for {args.envs}x{args.steps} control steps "
              f"({ctrl:9.0f} env-steps/s), step() {single / 2000 * 1e6:8.1f} us")

    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        print(f"speedup: batch {py[0] / cy[0]:.1f}x, single step {py[1] / cy[1]:.1f}x")
        _, q_py, u_py = time_batch(_pykernel, model, args.envs, 20, 1)
        _, q_cy, u_cy = time_batch(_ckernel, model, args.envs, 20, 1)
        diff = max(np.max(np.abs(q_py - q_cy)), np.max(np.abs(u_py - u_cy)))
        print(f"max state difference after 20 control steps: {diff:.2e}")


if __name__ == "__main__":
    main()
