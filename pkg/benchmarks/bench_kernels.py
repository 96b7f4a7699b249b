"""Compare the compiled and NumPy integration kernels on the F-16 sweeps.

    python3 benchmarks/bench_kernels.py [--grid 5,5,5,5] [--dt 0.001] [--repeat 1]
"""
import argparse
import time

import numpy as np

from occuval import f16model as fm
from occuval.simkit import BACKEND, SweepSpec, monte_carlo_sweep

CASES = [("lqr", 0.314159), ("mrac", 0.314159)]


def bench(mode, phi_max, grid, dt, backend, repeat):
    model = fm.F16Model.bundled().with_loop(mode=mode, phi_max=phi_max)
    sys_ = fm.closed_loop_field(model)
    spec = SweepSpec(grid=dict(zip(fm.PLANT_STATES, grid)), dt=dt, horizon=model.loop.horizon)
    x0_box = {v: (-a, a) for v, a in model.sets.initial_box(mode).items()}
    X_box = {v: (-a, a) for v, a in model.sets.state_box(mode).items()}
    C = np.hstack([model.plant.C, np.zeros((2, sys_.dim - 4))])
    best, rep = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        rep = monte_carlo_sweep(sys_, spec, x0_box, X_box, model.loop.command, C, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, rep.worst_cost


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", default="5,5,5,5")
    ap.add_argument("--dt", type=float, default=0.001)
    ap.add_argument("--repeat", type=int, default=1)
    args = ap.parse_args()
    grid = [int(v) for v in args.grid.split(",")]
    if BACKEND != "compiled":
        raise SystemExit("compiled kernel not built; run `pip install --no-build-isolation -e .` first")
    n = int(np.prod(grid))
    print(f"{n} trajectories, dt={args.dt}, horizon 10 s")
    print(f"{'case':<20}{'compiled (s)':>14}{'python (s)':>14}{'speedup':>10}{'|dJ|':>12}")
    for mode, phi in CASES:
        tc, jc = bench(mode, phi, grid, args.dt, "compiled", args.repeat)
        tp, jp = bench(mode, phi, grid, args.dt, "python", args.repeat)
        print(f"{mode + ' ' + format(phi, 'g'):<20}{tc:>14.2f}{tp:>14.2f}{tp / tc:>10.1f}{abs(jc - jp):>12.2e}")


if __name__ == "__main__":
    main()
