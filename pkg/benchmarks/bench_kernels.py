"""Numba vs. pure-numpy timings for the enumeration kernels.

Runs each kernel variant on the cell table of one mid-sized scenario and
reports the best of several repeats, after a warm-up call that absorbs JIT
compilation.  ``--end-to-end`` also times a short SGD run in subprocesses
with and without ``BVPO_LAB_DISABLE_NUMBA=1``.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bvpo_lab import _kernels
from bvpo_lab.estimators import build_cells
from bvpo_lab.policy import PolicyShape
from bvpo_lab.scenarios import random_scenario
from bvpo_lab.sgd import _loss_args

E2E_SNIPPET = """
import time
from bvpo_lab import _kernels
from bvpo_lab.policy import PolicyShape
from bvpo_lab.scenarios import random_scenario
from bvpo_lab.sgd import SgdConfig, run_sgd
sc = random_scenario(11, shape=PolicyShape(4, 8, 6), n_per_prompt=8)
sgd = SgdConfig(eta=0.5, K=60, estimator="optimal-alpha")
run_sgd(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, SgdConfig(eta=0.5, K=1), 1.0)
t = time.perf_counter()
run_sgd(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, sgd, 1.0)
print(_kernels.BACKEND, time.perf_counter() - t)
"""


def best_time(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    if _kernels.BACKEND != "numba":
        sys.exit("numba backend unavailable; nothing to compare")
    sc = random_scenario(11, shape=PolicyShape(4, 8, 6), n_per_prompt=8)
    cells = build_cells(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, sc.law)
    tab = (cells.gp, cells.gn, cells.wp, cells.wn, cells.coef, cells.ge)
    thetas = np.ascontiguousarray(sc.policy.theta[None, :]
                                  + 0.1 * np.random.default_rng(0).standard_normal((2000, sc.policy.shape.dim)))
    largs = _loss_args(sc.ref_policy, sc.d_t, sc.cfg)
    print(f"cells: n={cells.n} traces={cells.wp.shape[1]} dim={cells.mu.size}; "
          f"loss batch: {thetas.shape[0]} parameter vectors")

    cases = {
        "moments": (lambda: _kernels.moments_numpy(*tab), lambda: _kernels.moments_numba(*tab)),
        "mixture": (lambda: _kernels.mixture_numpy(*tab, cells.mu, 0.3),
                    lambda: _kernels.mixture_numba(*tab, cells.mu, 0.3)),
        "marginal_loss_batch": (lambda: _kernels.marginal_loss_batch_numpy(thetas, *largs),
                                lambda: _kernels.marginal_loss_batch_numba(thetas, *largs)),
    }
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'max |diff|':>13}")
    for name, (f_np, f_nb) in cases.items():
        diff = max_diff(f_np(), f_nb())
        t_np, t_nb = best_time(f_np, args.repeat), best_time(f_nb, args.repeat)
        print(f"{name:<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}{diff:>13.2e}")

    if args.end_to_end:
        for flag in ("0", "1"):
            env = dict(os.environ, BVPO_LAB_DISABLE_NUMBA=flag)
            res = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, check=True,
                                 capture_output=True, text=True)
            backend, secs = res.stdout.split()
            print(f"sgd K=60 optimal-alpha, backend={backend}: {float(secs):.3f} s")


if __name__ == "__main__":
    main()
