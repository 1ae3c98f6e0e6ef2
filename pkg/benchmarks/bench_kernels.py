"""Time the numba kernels against the numpy fallback on suite-sized trajectories.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--support 14 40]

Both backends are called directly, so the ``IAGPSTO_DISABLE_NUMBA`` flag does not matter here.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from iagpsto import _kernels as K
from iagpsto.planner import PlannerConfig, initial_problem
from iagpsto.scenario import load, suite_dir


def _args(sc, n_support: int, rng):
    gp, obj = initial_problem(sc.start, sc.goal, sc.world, PlannerConfig(), n_interior=n_support - 2)
    r = sc.robot
    q = gp.mean.reshape(n_support, -1)[:, :r.dof]
    q = q + 0.05 * rng.standard_normal(q.shape)
    kind, lengths, base, links, offs = r.args()
    grid = sc.grid.args()
    eps = sc.params.eps
    dts = np.diff(gp.times)
    rho = np.ones(n_support)
    return {
        "waypoint_terms": (kind, q, lengths, base, links, offs, r.ccb_radii, *grid, dts, eps),
        "obstacle_value_grad": (kind, q, rho, lengths, base, links, offs, r.ccb_radii, *grid, dts, eps, 1e-6),
        "ball_clearance": (kind, q, lengths, base, links, offs, r.ccb_radii, *grid),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--support", type=int, nargs="+", default=[14, 40])
    ap.add_argument("--scenarios", nargs="+", default=["pt-c-disc", "arm-c-post"])
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba backend unavailable (missing or disabled); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'scenario':<12} {'N':>4} {'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for sid in args.scenarios:
        sc = load(suite_dir() / f"{sid}.yaml")
        for n in args.support:
            for name, a in _args(sc, n, rng).items():
                f_np = getattr(K, name + "_np")
                f_nb = getattr(K, name + "_nb")
                ref, out = f_np(*a), f_nb(*a)  # also compiles
                diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y))))
                           for x, y in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                                           np.atleast_1d(out) if not isinstance(out, tuple) else out))
                t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
                t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
                print(f"{sid:<12} {n:>4} {name:<20} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
