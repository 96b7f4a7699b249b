from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..piecewise import PiecewiseSystem
from ..polyalg import Polynomial

REPORT_SCHEMA = "occuval.sweep/1"
METHODS = {"euler": 0, "rk4": 1}
BLOWUP = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, step: int, time: float):
        super().__init__(f"state magnitude exceeded {BLOWUP:g} at step {step} (t={time:g})")
        self.step = step
        self.time = time


def _steps(T: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if T < 0:
        raise ValueError("horizon must be non-negative")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return n


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    cells: np.ndarray
    state_vars: tuple[str, ...]
    exit_step: int = -1
    cost: float | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def channel(self, var: str) -> np.ndarray:
        return self.states[:, self.state_vars.index(var)]


def _box_arrays(sys: PiecewiseSystem, box: Mapping[str, tuple[float, float]] | None):
    lo = np.full(sys.dim, -np.inf)
    hi = np.full(sys.dim, np.inf)
    for i, v in enumerate(sys.state_vars):
        if box and v in box:
            lo[i], hi[i] = box[v]
    return lo, hi


def integrate_many(
    sys: PiecewiseSystem,
    x0s: np.ndarray,
    T: float,
    dt: float,
    method: str = "rk4",
    t0: float = 0.0,
    box: Mapping[str, tuple[float, float]] | None = None,
    record: bool = False,
    backend: str | None = None,
):
    """Integrate a batch of initial states; returns ``(final, exit_step, div_step, states, cells)``."""
    from . import get_kernel

    if method not in METHODS:
        raise ValueError(f"method must be one of {sorted(METHODS)}")
    n = _steps(T, dt)
    comp = sys.compile()
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if x0s.shape[1] != sys.dim:
        raise ValueError(f"initial states have dimension {x0s.shape[1]}, system has {sys.dim}")
    if not np.isfinite(x0s).all():
        raise ValueError("initial state must be finite")
    lo, hi = _box_arrays(sys, box)
    states = np.zeros((len(x0s), n + 1, sys.dim)) if record else None
    cells = np.zeros((len(x0s), n), dtype=np.int8) if record else None
    kernel = get_kernel(backend)
    final, exit_step, div_step = kernel(
        comp.exps, comp.coefs, comp.offsets, comp.nguards, x0s, float(t0), float(dt), n,
        METHODS[method], lo, hi, BLOWUP, states, cells,
    )
    return np.asarray(final), np.asarray(exit_step), np.asarray(div_step), states, cells


def integrate(
    sys: PiecewiseSystem,
    x0: Sequence[float],
    T: float,
    dt: float,
    method: str = "rk4",
    t0: float = 0.0,
    box: Mapping[str, tuple[float, float]] | None = None,
    backend: str | None = None,
) -> Trajectory:
    """Fixed-step integration on a uniform grid ending exactly at ``t0 + T``."""
    if dt > 0.01:
        raise ValueError("dt must not exceed 0.01")
    n = _steps(T, dt)
    _, exit_step, div_step, states, cells = integrate_many(
        sys, np.asarray(x0, dtype=float)[None, :], T, dt, method, t0, box, record=True, backend=backend
    )
    if div_step[0] >= 0:
        raise DivergenceError(int(div_step[0]), t0 + div_step[0] * dt)
    times = t0 + dt * np.arange(n + 1)
    times[-1] = t0 + T
    return Trajectory(times, states[0], cells[0], tuple(sys.state_vars), exit_step=int(exit_step[0]))


def _output_matrix(dim: int, c, C) -> np.ndarray:
    if C is None:
        C = np.eye(len(c), dim)
    return np.asarray(C, dtype=float)


def trajectory_cost(traj: Trajectory, c: Sequence[float], C: np.ndarray | None = None) -> float:
    """Terminal tracking error ``||c - C x(T)||^2`` (non-negative)."""
    C = _output_matrix(traj.states.shape[1], c, C)
    err = np.asarray(c, dtype=float) - C @ traj.final
    return float(err @ err)


@dataclass(frozen=True)
class SweepSpec:
    grid: Mapping[str, int]
    dt: float = 0.001
    horizon: float = 10.0
    method: str = "rk4"

    def __post_init__(self):
        if any(int(n) < 1 for n in self.grid.values()):
            raise ValueError("grid counts must be >= 1")
        _steps(self.horizon, self.dt)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class SweepReport:
    worst_cost: float
    worst_initial: list[float]
    worst_index: int
    costs: list[float]
    initial_states: list[list[float]]
    violations: list[dict]
    wall_time: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config_hash": self.meta.get("config_hash"),
            "integrator": {k: self.meta.get(k) for k in ("method", "dt", "horizon", "backend")},
            "worst_cost": self.worst_cost,
            "worst_cost_concave": -self.worst_cost,
            "worst_index": self.worst_index,
            "worst_initial": self.worst_initial,
            "n_trajectories": len(self.costs),
            "costs": self.costs,
            "initial_states": self.initial_states,
            "violations": self.violations,
            "metadata": {"wall_time": self.wall_time},
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def grid_points(sys: PiecewiseSystem, grid: Mapping[str, int], x0_box: Mapping[str, tuple[float, float]]):
    """Cartesian product of evenly spaced 1-D grids (endpoints included)."""
    axes = []
    for v in sys.state_vars:
        lo, hi = x0_box.get(v, (0.0, 0.0))
        n = int(grid.get(v, 1))
        if n == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            axes.append(np.linspace(lo, hi, n))
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, sys.dim)


def config_hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def monte_carlo_sweep(
    sys: PiecewiseSystem,
    spec: SweepSpec,
    x0_box: Mapping[str, tuple[float, float]],
    X_box: Mapping[str, tuple[float, float]] | None,
    c: Sequence[float],
    C: np.ndarray | None = None,
    backend: str | None = None,
    chunk: int = 4096,
) -> SweepReport:
    """Grid sweep over the initial box; the worst terminal cost and containment exits."""
    from . import BACKEND

    start = time.perf_counter()
    x0s = grid_points(sys, spec.grid, x0_box)
    C = _output_matrix(sys.dim, c, C)
    c = np.asarray(c, dtype=float)
    costs = np.empty(len(x0s))
    violations = []
    for a in range(0, len(x0s), chunk):
        batch = x0s[a:a + chunk]
        final, exit_step, div_step, _, _ = integrate_many(
            sys, batch, spec.horizon, spec.dt, spec.method, box=X_box, backend=backend
        )
        err = c[None, :] - final @ C.T
        costs[a:a + len(batch)] = (err**2).sum(axis=1)
        for i in range(len(batch)):
            idx = a + i
            if div_step[i] >= 0:
                costs[idx] = math.inf
                violations.append({"index": idx, "kind": "divergence", "step": int(div_step[i]),
                                   "time": float(div_step[i] * spec.dt), "initial": batch[i].tolist()})
            elif exit_step[i] >= 0:
                violations.append({"index": idx, "kind": "exit", "step": int(exit_step[i]),
                                   "time": float(exit_step[i] * spec.dt), "initial": batch[i].tolist()})
    worst = float(costs.max()) if len(costs) else 0.0
    ties = [i for i in range(len(costs)) if costs[i] == worst]
    widx = min(ties, key=lambda i: tuple(x0s[i])) if ties else -1
    meta = {
        "method": spec.method,
        "dt": spec.dt,
        "horizon": spec.horizon,
        "backend": backend or BACKEND,
        "config_hash": config_hash({
            "grid": dict(spec.grid), "dt": spec.dt, "T": spec.horizon, "method": spec.method,
            "x0_box": {k: list(v) for k, v in x0_box.items()}, "c": c.tolist(),
            "system": sys.meta,
        }),
    }
    return SweepReport(
        worst_cost=worst,
        worst_initial=x0s[widx].tolist() if widx >= 0 else [],
        worst_index=widx,
        costs=costs.tolist(),
        initial_states=x0s.tolist(),
        violations=violations,
        wall_time=time.perf_counter() - start,
        meta=meta,
    )


def emit_plot_data(
    trajectories: Sequence[Trajectory],
    out_dir: str | Path,
    channels: Sequence[str] | None = None,
    reference: Trajectory | None = None,
    stride: int = 1,
) -> list[Path]:
    """Write one CSV per state channel: ``t``, one column per trajectory, then ``ref``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if channels is None:
        source = trajectories[0] if trajectories else reference
        channels = source.state_vars if source is not None else ()
    if trajectories:
        times = trajectories[0].times
    elif reference is not None:
        times = reference.times
    else:
        times = np.array([])
    rows = np.arange(0, len(times), max(1, int(stride)))
    if len(times) and rows[-1] != len(times) - 1:
        rows = np.append(rows, len(times) - 1)
    paths = []
    for ch in channels:
        path = out_dir / f"{ch}.csv"
        header = ["t"] + [f"traj{i}" for i in range(len(trajectories))]
        cols = [tr.channel(ch) for tr in trajectories]
        if reference is not None:
            ref_var = ch if ch in reference.state_vars else f"{ch}_r"
            if ref_var in reference.state_vars:
                header.append("ref")
                cols.append(reference.channel(ref_var))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in rows:
                w.writerow([repr(float(times[k]))] + [repr(float(col[k])) for col in cols])
        paths.append(path)
    return paths


def liouville_residual(sys: PiecewiseSystem, traj: Trajectory, v: Polynomial) -> float:
    """``v(end) - v(start) - integral of (dv/dt + grad v . f)`` by the trapezoid rule.

    Each panel ``[t_k, t_k+1]`` is evaluated at both ends with the field of
    the cell that drove step ``k``, so a switch does not put a jump inside a
    panel.
    """
    universe = sys.universe
    v = v.with_universe(universe)
    dv_t = v.differentiate(sys.time_var)
    grads = [v.differentiate(x) for x in sys.state_vars]
    gen = []
    for cell in sys.cells:
        g = dv_t
        for gi, fi in zip(grads, cell.field):
            g = g + gi * fi
        gen.append(g)
    n = len(traj.times) - 1
    cells = np.asarray(traj.cells[:n], dtype=int)
    pts = np.column_stack([traj.times, traj.states])
    names = (sys.time_var,) + tuple(sys.state_vars)
    left, right = np.empty(n), np.empty(n)
    for j, g in enumerate(gen):
        idx = np.flatnonzero(cells == j)
        if len(idx):
            left[idx] = g.evaluate_array(pts[idx], names)
            right[idx] = g.evaluate_array(pts[idx + 1], names)
    integral = float(0.5 * np.diff(traj.times) @ (left + right))
    p0 = {sys.time_var: traj.times[0], **dict(zip(sys.state_vars, traj.states[0]))}
    p1 = {sys.time_var: traj.times[-1], **dict(zip(sys.state_vars, traj.states[-1]))}
    return v.evaluate(p1) - v.evaluate(p0) - integral
