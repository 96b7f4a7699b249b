"""Command-line front end: ``occuval {simulate,mc,certify}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import f16model as fm
from .simkit import SweepSpec, emit_plot_data, integrate, monte_carlo_sweep, trajectory_cost

PHI_PRESETS = {"nominal": 1.0, "degraded": 0.314159}


class UsageError(ValueError):
    pass


def parse_phi_max(text: str) -> float:
    if text in PHI_PRESETS:
        return PHI_PRESETS[text]
    try:
        val = float(text)
    except ValueError:
        raise UsageError(f"--phi-max: expected nominal, degraded or radians, got {text!r}") from None
    if not val > 0:
        raise UsageError("--phi-max: must be positive")
    return val


def parse_orders(text: str) -> list[int]:
    try:
        if ".." in text:
            a, b = text.split("..")
            orders = list(range(int(a), int(b) + 1))
        else:
            orders = [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--orders: expected a..b or a comma list, got {text!r}") from None
    if not orders or any(d < 1 for d in orders) or any(b <= a for a, b in zip(orders, orders[1:])):
        raise UsageError("--orders: need a nonempty increasing list of positive integers")
    return orders


def parse_grid(text: str) -> list[int]:
    try:
        grid = [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--grid: expected n,n,n,n, got {text!r}") from None
    if len(grid) != 4 or any(n < 1 for n in grid):
        raise UsageError("--grid: four positive counts (beta, phi, p, r) are required")
    return grid


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occuval", description="Worst-case tracking-error validation of flight control loops.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--problem", help="problem JSON (defaults to the bundled F-16 dutch-roll case)")
        p.add_argument("--mode", choices=("lqr", "mrac"))
        p.add_argument("--phi-max", help="nominal, degraded or a value in radians")
        p.add_argument("--dt", type=float)
        p.add_argument("--method", choices=("euler", "rk4"))
        p.add_argument("--grid", help="grid counts n,n,n,n over (beta, phi, p, r)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--backend", choices=("compiled", "python"))
        p.add_argument("--error-model", choices=("exact", "approx"))
        p.add_argument("--sigmoid-degree", type=int, choices=(1, 3, 5))
        p.add_argument("--seed", type=int, default=0, help="seed for randomized diagnostics")

    s = sub.add_parser("simulate", help="integrate one trajectory and export plot data")
    common(s)
    s.add_argument("--x0", help="initial plant state in degrees: beta,phi,p,r (default 0)")
    s.add_argument("--horizon", type=float)
    s.add_argument("--reference", action="store_true", help="integrate the reference model only")
    s.add_argument("--stride", type=int, default=10, help="CSV row stride")

    m = sub.add_parser("mc", help="Monte-Carlo grid sweep of the initial set")
    common(m)

    c = sub.add_parser("certify", help="moment hierarchy bounds and verdict")
    common(c)
    c.add_argument("--orders", default="1..4", help="relaxation orders a..b")
    c.add_argument("--threshold", type=float)
    g = c.add_mutually_exclusive_group()
    g.add_argument("--sparse", dest="sparse", action="store_true", default=None)
    g.add_argument("--dense", dest="sparse", action="store_false")
    c.add_argument("--sdpa-export", help="write each order's relaxation in sparse SDPA format")
    c.add_argument("--test-rule", choices=("uniform", "generator"), default="uniform")
    c.add_argument("--skip-mc", action="store_true", help="do not run the Monte-Carlo sandwich")
    c.add_argument("--preset", help="solver preset (overrides OCCUVAL_SOLVER_PRESET)")
    return ap


def _load(args) -> tuple[fm.F16Model, fm.LoopConfig]:
    if args.problem:
        path = Path(args.problem)
        if not path.exists():
            raise UsageError(f"--problem: file {path} does not exist")
        model = fm.F16Model.from_file(path)
    else:
        model = fm.F16Model.bundled()
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.phi_max is not None:
        changes["phi_max"] = parse_phi_max(args.phi_max)
    if args.error_model:
        changes["error_model"] = args.error_model
    if args.sigmoid_degree:
        changes["sigmoid_degree"] = args.sigmoid_degree
    if getattr(args, "horizon", None) is not None:
        if args.horizon < 0:
            raise UsageError("--horizon: must be non-negative")
        changes["horizon"] = args.horizon if args.horizon > 0 else model.loop.horizon
    if changes:
        model = model.with_loop(**changes)
    return model, model.loop


def _sweep_spec(model: fm.F16Model, args) -> SweepSpec:
    grid = parse_grid(args.grid) if args.grid else list(model.sweep.get("grid", (5, 5, 5, 5)))
    dt = args.dt if args.dt is not None else float(model.sweep.get("dt", 0.001))
    method = args.method or model.sweep.get("method", "rk4")
    if not dt > 0:
        raise UsageError("--dt: must be positive")
    return SweepSpec(grid=dict(zip(fm.PLANT_STATES, grid)), dt=dt, horizon=model.loop.horizon, method=method)


def output_matrix(model: fm.F16Model, dim: int) -> np.ndarray:
    """Plant output map padded with zero columns for the weight and reference states."""
    C = model.plant.C
    return np.hstack([C, np.zeros((C.shape[0], dim - C.shape[1]))])


def run_sweep(model: fm.F16Model, spec: SweepSpec, backend=None):
    cfg = model.loop
    sys_ = fm.closed_loop_field(model, cfg)
    x0_box = {v: (-a, a) for v, a in model.sets.initial_box(cfg.mode).items()}
    X_box = {v: (-a, a) for v, a in model.sets.state_box(cfg.mode).items()}
    C = output_matrix(model, sys_.dim)
    return monte_carlo_sweep(sys_, spec, x0_box, X_box, cfg.command, C, backend=backend)


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj: dict, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    model, cfg = _load(args)
    T = cfg.horizon if args.horizon is None else args.horizon
    dt = args.dt if args.dt is not None else float(model.sweep.get("dt", 0.001))
    method = args.method or model.sweep.get("method", "rk4")
    out = _out_dir(args)
    ref_sys = fm.reference_system(model, cfg)
    ref = integrate(ref_sys, np.zeros(4), T, dt, method, backend=args.backend)
    if args.reference:
        trajs, J = [], None
        final = ref.final
    else:
        sys_ = fm.closed_loop_field(model, cfg)
        x0 = np.zeros(sys_.dim)
        if args.x0:
            try:
                vals = [float(v) * fm.DEG for v in args.x0.split(",")]
            except ValueError:
                raise UsageError("--x0: expected four numbers in degrees") from None
            if len(vals) != 4:
                raise UsageError("--x0: expected four numbers (beta, phi, p, r)")
            x0[:4] = vals
        box = {v: (-a, a) for v, a in model.sets.state_box(cfg.mode).items()}
        tr = integrate(sys_, x0, T, dt, method, box=box, backend=args.backend)
        trajs = [tr]
        J = trajectory_cost(tr, cfg.command, output_matrix(model, sys_.dim))
        final = tr.final
    summary = {
        "schema": "occuval.simulation/1",
        "mode": "reference" if args.reference else cfg.mode,
        "phi_max": cfg.phi_max,
        "horizon": T,
        "dt": dt,
        "method": method,
        "terminal_cost": J,
        "final_state": [float(v) for v in final],
        "reference_final": [float(v) for v in ref.final],
    }
    if out is not None:
        emit_plot_data(trajs, out, None if trajs else ref.state_vars, reference=ref, stride=args.stride)
        _dump(summary, out / "summary.json")
    if J is not None:
        print(f"J = {J:.6e}")
    print("final state: " + ", ".join(f"{v:.6g}" for v in final))
    return 0


def cmd_mc(args) -> int:
    model, cfg = _load(args)
    spec = _sweep_spec(model, args)
    rep = run_sweep(model, spec, args.backend)
    out = _out_dir(args)
    if out is not None:
        rep.to_json(out / "sweep.json")
    exits = sum(1 for v in rep.violations if v["kind"] == "exit")
    divs = sum(1 for v in rep.violations if v["kind"] == "divergence")
    ic = ", ".join(f"{x / fm.DEG:.4g}" for x in rep.worst_initial[:4])
    print(f"{'case':<28}{'worst J':>14}   argmax x0 (deg)          exits  diverged")
    label = f"{cfg.mode.upper()} phi_max={cfg.phi_max:g}"
    print(f"{label:<28}{rep.worst_cost:>14.4e}   [{ic}]  {exits:>5}  {divs:>8}")
    return 0


def cmd_certify(args) -> int:
    from . import sdpiface

    model, cfg = _load(args)
    threshold = args.threshold if args.threshold is not None else model.sets.terminal_threshold
    orders = parse_orders(args.orders)
    sparse_split = args.sparse if args.sparse is not None else cfg.mode == "mrac"
    prob = fm.validation_problem(model, cfg, sparse=sparse_split)
    out = _out_dir(args)
    opts = sdpiface.preset(args.preset)

    if args.sdpa_export:
        from .liouville import assemble_relaxation

        base = Path(args.sdpa_export)
        for d in orders:
            path = base if len(orders) == 1 else base.with_name(f"{base.stem}.d{d}{base.suffix or '.dat-s'}")
            assemble_relaxation(prob, d, sparse_split, rule=args.test_rule).to_sdpa(path)

    mc = None
    if not args.skip_mc:
        spec = _sweep_spec(model, args)
        mc = lambda: run_sweep(model, spec, args.backend)  # noqa: E731
    config = {"loop": cfg.to_dict(), "sets": model.sets.to_dict(), "preset": opts["name"]}
    rep = sdpiface.run_hierarchy(prob, orders, sparse_split, threshold, mc, opts, args.test_rule, config)
    print(f"{'d':>3}  {'upper bound':>14}  {'cpu (s)':>10}  status")
    for o in rep.orders:
        print(f"{o.order:>3}  {o.bound:>14.5g}  {o.cpu:>10.1f}  {o.status}")
    if rep.mc_value is not None:
        print(f"Monte-Carlo worst J: {rep.mc_value:.5g}")
    for note in rep.notes:
        print("note: " + note)
    print(f"verdict: {rep.verdict} (threshold {threshold:g})")
    if rep.violating_initial:
        print("violating x0 (deg): " + ", ".join(f"{x / fm.DEG:.4g}" for x in rep.violating_initial[:4]))
    if out is not None:
        rep.to_json(out / "certification.json")
    return rep.exit_code


COMMANDS = {"simulate": cmd_simulate, "mc": cmd_mc, "certify": cmd_certify}


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"occuval: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        if args.verbose:
            raise
        print(f"occuval: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
