"""Conic-solver adapter, hierarchy driver and certification verdicts.

The relaxation is handed to an external solver as plain conic data (linear
objective, equality rows, PSD blocks in scaled lower/upper-triangle vector
form).  Whatever comes back is re-checked here: minimum eigenvalue of every
block and the equality residual are recomputed from the returned moments.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .liouville import MatrixForm, MomentRelaxation, ValidationProblem, assemble_relaxation

log = logging.getLogger(__name__)

REPORT_SCHEMA = "occuval.certification/1"
STATUSES = ("optimal", "near-optimal", "infeasible", "unbounded", "solver-failure")
VERDICTS = ("certified", "not-certified", "inconclusive")
EXIT_CODES = {"certified": 0, "not-certified": 2, "inconclusive": 3, "error": 1}

PSD_TOL = 1e-6
RESIDUAL_TOL = 1e-6
MONOTONE_TOL = 1e-6
SANDWICH_TOL = 1e-6

# Named solver presets; the environment variable OCCUVAL_SOLVER_PRESET picks one.
PRESETS: dict[str, dict] = {
    "default": {"solver": "qics", "qics": {"tol_gap": 1e-8, "tol_feas": 1e-8, "max_iter": 150, "max_time": 7200}},
    "fast": {"solver": "qics", "qics": {"tol_gap": 1e-6, "tol_feas": 1e-6, "max_iter": 80, "max_time": 1800}},
    "clarabel": {"solver": "clarabel",
                 "clarabel": {"tol_gap_abs": 1e-8, "tol_gap_rel": 1e-8, "tol_feas": 1e-8, "max_iter": 400}},
    "scs": {"solver": "scs", "scs": {"eps_abs": 1e-7, "eps_rel": 1e-7, "max_iters": 200000}},
}


class SolverError(RuntimeError):
    pass


class SandwichViolation(RuntimeError):
    pass


def preset(name: str | None = None) -> dict:
    name = name or os.environ.get("OCCUVAL_SOLVER_PRESET", "default")
    if name not in PRESETS:
        raise SolverError(f"unknown solver preset {name!r}; choose from {sorted(PRESETS)}")
    out = json.loads(json.dumps(PRESETS[name]))
    out["name"] = name
    return out


# -- conic data ---------------------------------------------------------

@dataclass
class PSDBlock:
    """``sum_k y[var_k] * coef_k * E(rows_k, cols_k) + constant >= 0`` (upper-triangle triplets)."""

    size: int
    rows: np.ndarray
    cols: np.ndarray
    var: np.ndarray
    coefs: np.ndarray
    constant: np.ndarray | None = None
    name: str = ""

    @classmethod
    def from_form(cls, form: MatrixForm) -> "PSDBlock":
        return cls(form.size, form.rows, form.cols, form.index, form.coefs, None, form.name)

    @classmethod
    def from_matrices(cls, terms: Sequence[tuple[int, np.ndarray]], constant=None, name: str = "") -> "PSDBlock":
        """Build from ``(variable-id, symmetric matrix)`` pairs."""
        rows, cols, var, coefs = [], [], [], []
        size = None
        for k, M in terms:
            M = np.asarray(M, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError("coefficient matrices must be square")
            if not np.allclose(M, M.T, atol=0, rtol=0):
                raise ValueError(f"coefficient matrix of variable {k} is not symmetric")
            size = M.shape[0] if size is None else size
            if M.shape[0] != size:
                raise ValueError("coefficient matrices of one block must share a size")
            r, c = np.nonzero(np.triu(M))
            rows += r.tolist()
            cols += c.tolist()
            var += [k] * len(r)
            coefs += M[r, c].tolist()
        if constant is not None:
            constant = np.asarray(constant, dtype=float)
            size = constant.shape[0] if size is None else size
        if size is None:
            raise ValueError("empty PSD block")
        arr = lambda x, t: np.array(x, dtype=t)  # noqa: E731
        return cls(size, arr(rows, np.int64), arr(cols, np.int64), arr(var, np.int64), arr(coefs, float), constant, name)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        M = np.zeros((self.size, self.size))
        np.add.at(M, (self.rows, self.cols), self.coefs * np.asarray(y)[self.var])
        iu = np.triu_indices(self.size, 1)
        M[(iu[1], iu[0])] = M[iu]
        if self.constant is not None:
            M = M + self.constant
        return M

    def svec_map(self, n_vars: int, order: str) -> tuple[sparse.csr_matrix, np.ndarray]:
        """Linear map ``y -> svec(M(y))`` (and constant) in SCS (``lower``) or Clarabel (``upper``) layout."""
        n = self.size
        i, j = self.rows, self.cols  # i <= j
        if order == "lower":
            # column-major lower triangle: entry (r=j, c=i)
            pos = i * n - i * (i - 1) // 2 + (j - i)
        elif order == "upper":
            # column-major upper triangle: entry (r=i, c=j)
            pos = j * (j + 1) // 2 + i
        else:
            raise ValueError(order)
        scale = np.where(i == j, 1.0, math.sqrt(2.0))
        m = n * (n + 1) // 2
        S = sparse.csr_matrix((self.coefs * scale, (pos, self.var)), shape=(m, n_vars))
        const = np.zeros(m)
        if self.constant is not None:
            C = self.constant
            for r in range(n):
                for c in range(r, n):
                    p = (r * n - r * (r - 1) // 2 + (c - r)) if order == "lower" else (c * (c + 1) // 2 + r)
                    const[p] = C[r, c] * (1.0 if r == c else math.sqrt(2.0))
        return S, const


@dataclass
class ConicProblem:
    """``maximize c.y + c0`` s.t. ``A y = b`` and every block PSD."""

    n_vars: int
    objective: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    blocks: list[PSDBlock]
    objective_constant: float = 0.0
    sense: str = "max"
    labels: list[str] = field(default_factory=list)
    mass_rows: int = 1
    name: str = ""

    @classmethod
    def from_relaxation(cls, relax: MomentRelaxation) -> "ConicProblem":
        mass = sum(1 for lab in relax.row_labels if lab.startswith("mass"))
        return cls(
            n_vars=relax.n_vars,
            objective=relax.objective.copy(),
            A_eq=relax.A_eq.tocsr(),
            b_eq=relax.b_eq.copy(),
            blocks=[PSDBlock.from_form(b) for b in relax.blocks],
            objective_constant=relax.objective_constant,
            sense=relax.sense,
            labels=list(relax.row_labels),
            mass_rows=mass,
            name=relax.name,
        )

    def validate(self):
        if self.objective.shape != (self.n_vars,):
            raise SolverError("objective length does not match the variable count")
        if self.A_eq.shape[1] != self.n_vars or self.A_eq.shape[0] != len(self.b_eq):
            raise SolverError("equality data has inconsistent shape")
        if self.mass_rows < 1:
            raise SolverError("a mass normalization row is required")
        for b in self.blocks:
            if len(b.var) and (b.var.min() < 0 or b.var.max() >= self.n_vars):
                raise SolverError(f"block {b.name!r} references an undeclared variable")
            if len(b.rows) and np.any(b.rows > b.cols):
                raise SolverError(f"block {b.name!r} must be given by upper-triangle entries")
            if b.constant is not None and not np.allclose(b.constant, b.constant.T):
                raise SolverError(f"constant of block {b.name!r} is not symmetric")
        if self.sense not in ("max", "min"):
            raise SolverError("sense must be 'max' or 'min'")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.objective, self.b_eq, self.A_eq.indptr, self.A_eq.indices, self.A_eq.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        for b in self.blocks:
            h.update(str(b.size).encode())
            for arr in (b.rows, b.cols, b.var, b.coefs):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _full_vec(self):
        """``h - G y = vec(M(y))`` for every block, full row-major vectorization."""
        parts, rhs = [], []
        for b in self.blocks:
            n = b.size
            off = b.rows != b.cols
            r = np.concatenate([b.rows, b.cols[off]])
            c = np.concatenate([b.cols, b.rows[off]])
            v = np.concatenate([b.coefs, b.coefs[off]])
            k = np.concatenate([b.var, b.var[off]])
            parts.append(sparse.csr_matrix((-v, (r * n + c, k)), shape=(n * n, self.n_vars)))
            rhs.append(np.zeros(n * n) if b.constant is None else b.constant.ravel())
        if not parts:
            return sparse.csr_matrix((0, self.n_vars)), np.zeros(0)
        return sparse.vstack(parts, format="csr"), np.concatenate(rhs)

    def _stacked(self, order: str):
        """``A x + s = b`` rows: zero cone (equalities) then one PSD cone per block."""
        parts, rhs = [self.A_eq], [self.b_eq]
        for b in self.blocks:
            S, const = b.svec_map(self.n_vars, order)
            parts.append(-S)
            rhs.append(const)
        A = sparse.vstack(parts, format="csc")
        return A, np.concatenate(rhs)


@dataclass
class SolveResult:
    status: str
    bound: float
    moments: np.ndarray | None
    iterations: int = 0
    solve_time: float = 0.0
    gap: float | None = None
    solver: str = ""
    message: str = ""
    min_eigenvalue: float | None = None
    residual: float | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status, "bound": _num(self.bound), "iterations": self.iterations,
            "gap": _num(self.gap), "solver": self.solver, "message": self.message,
            "min_eigenvalue": _num(self.min_eigenvalue), "residual": _num(self.residual),
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return str(x)
    return x


def _solve_clarabel(p: ConicProblem, opts: dict):
    import clarabel

    A, b = p._stacked("upper")
    c = -p.objective if p.sense == "max" else p.objective
    P = sparse.csc_matrix((p.n_vars, p.n_vars))
    cones = []
    if p.A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(p.A_eq.shape[0]))
    cones += [clarabel.PSDTriangleConeT(blk.size) for blk in p.blocks]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    for k, v in opts.get("clarabel", {}).items():
        setattr(settings, k, v)
    solver = clarabel.DefaultSolver(P, c, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    mapped = {
        "Solved": "optimal", "AlmostSolved": "near-optimal",
        "PrimalInfeasible": "infeasible", "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "unbounded", "AlmostDualInfeasible": "unbounded",
    }.get(status, "solver-failure")
    y = np.asarray(sol.x, dtype=float)
    obj = float(p.objective @ y + p.objective_constant)
    gap = abs(sol.obj_val - sol.obj_val_dual) if mapped in ("optimal", "near-optimal") else None
    return mapped, obj, y, int(sol.iterations), float(sol.solve_time), gap, f"clarabel {status}"


def _solve_qics(p: ConicProblem, opts: dict):
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")  # skips a noisy TBB probe
    import qics

    G, h = p._full_vec()
    c = -p.objective if p.sense == "max" else p.objective
    model = qics.Model(
        c=c.reshape(-1, 1), A=p.A_eq.tocsr(), b=p.b_eq.reshape(-1, 1), G=G, h=h.reshape(-1, 1),
        cones=[qics.cones.PosSemidefinite(blk.size) for blk in p.blocks],
    )
    solver = qics.Solver(model, verbose=0, **opts.get("qics", {}))
    info = solver.solve()
    status = info["sol_status"]
    mapped = {"optimal": "optimal", "near_optimal": "near-optimal", "pinfeas": "infeasible",
              "dinfeas": "unbounded", "near_pinfeas": "infeasible", "near_dinfeas": "unbounded"}.get(status, "solver-failure")
    y = np.asarray(info["x_opt"], dtype=float).ravel()
    obj = float(p.objective @ y + p.objective_constant)
    gap = abs(info["p_obj"] - info["d_obj"]) if mapped in ("optimal", "near-optimal") else None
    return mapped, obj, y, int(info["num_iter"]), float(info["solve_time"]), gap, f"qics {status} ({info['exit_status']})"


def _solve_scs(p: ConicProblem, opts: dict):
    import scs

    A, b = p._stacked("lower")
    c = -p.objective if p.sense == "max" else p.objective
    cone = {"z": int(p.A_eq.shape[0]), "s": [blk.size for blk in p.blocks]}
    settings = {"verbose": False}
    settings.update(opts.get("scs", {}))
    solver = scs.SCS({"A": A, "b": b, "c": c}, cone, **settings)
    sol = solver.solve()
    info = sol["info"]
    status = info["status"]
    mapped = {
        "solved": "optimal", "solved (inaccurate - reached max_iters)": "near-optimal",
        "solved_inaccurate": "near-optimal", "infeasible": "infeasible",
        "infeasible_inaccurate": "infeasible", "unbounded": "unbounded", "unbounded_inaccurate": "unbounded",
    }.get(status, "near-optimal" if "solved" in status else "solver-failure")
    y = np.asarray(sol["x"], dtype=float)
    obj = float(p.objective @ y + p.objective_constant)
    gap = abs(info["pobj"] - info["dobj"]) if mapped in ("optimal", "near-optimal") else None
    return mapped, obj, y, int(info["iter"]), float(info["solve_time"]) / 1e3, gap, f"scs {status}"




def verify(p: ConicProblem, y: np.ndarray) -> tuple[float, float]:
    """(minimum block eigenvalue, relative equality residual) of a candidate point."""
    min_eig = min(float(np.linalg.eigvalsh(b.evaluate(y)).min()) for b in p.blocks) if p.blocks else 0.0
    r = p.A_eq @ y - p.b_eq
    scale = max(1.0, float(np.abs(p.b_eq).max(initial=0.0)))
    res = float(np.abs(r).max(initial=0.0)) / scale
    return min_eig, res


def solve(p: ConicProblem, opts: Mapping | str | None = None) -> SolveResult:
    """Solve through the selected adapter and re-verify the returned moments."""
    p.validate()
    opts = preset(opts) if opts is None or isinstance(opts, str) else dict(opts)
    which = opts.get("solver", "auto")
    if which == "auto":
        which = "qics"
    start = time.perf_counter()
    try:
        if which == "clarabel":
            status, obj, y, iters, _, gap, msg = _solve_clarabel(p, opts)
        elif which == "qics":
            status, obj, y, iters, _, gap, msg = _solve_qics(p, opts)
        elif which == "scs":
            status, obj, y, iters, _, gap, msg = _solve_scs(p, opts)
        else:
            raise SolverError(f"unknown solver {which!r}")
    except SolverError:
        raise
    except Exception as exc:  # adapter failure surfaces the solver's message
        return SolveResult("solver-failure", math.nan, None, solver=which, message=str(exc),
                           solve_time=time.perf_counter() - start)
    elapsed = time.perf_counter() - start
    res = SolveResult(status, obj, y, iters, elapsed, gap, which, msg)
    if status in ("optimal", "near-optimal"):
        min_eig, resid = verify(p, y)
        res.min_eigenvalue, res.residual = min_eig, resid
        problems = []
        if min_eig < -PSD_TOL:
            problems.append(f"min eigenvalue {min_eig:.3e}")
        if resid > RESIDUAL_TOL:
            problems.append(f"equality residual {resid:.3e}")
        if problems:
            res.status = "near-optimal"
            res.message += "; local check: " + ", ".join(problems)
        if not math.isfinite(obj):
            res.status = "solver-failure"
    else:
        res.bound = math.nan if status == "solver-failure" else (math.inf if status == "unbounded" else -math.inf)
    return res


# -- verdicts and reports -----------------------------------------------

def verdict(bound: float, mc_value: float, threshold: float = 0.003) -> str:
    """``certified`` if the bound clears the threshold, ``not-certified`` if a
    simulated trajectory already exceeds it, ``inconclusive`` otherwise."""
    if bound < mc_value - SANDWICH_TOL:
        raise SandwichViolation(
            f"relaxation bound {bound:.6g} is below the Monte-Carlo value {mc_value:.6g}; the relaxation is unsound"
        )
    if bound <= threshold:
        return "certified"
    if mc_value > threshold:
        return "not-certified"
    return "inconclusive"


@dataclass
class OrderResult:
    order: int
    bound: float
    cpu: float
    status: str
    block_sizes: dict
    solver: SolveResult | None = None

    def to_dict(self) -> dict:
        return {
            "d": self.order, "bound": _num(self.bound), "bound_concave": _num(-self.bound),
            "cpu_s": self.cpu, "status": self.status,
            "largest_block": max(self.block_sizes.values()) if self.block_sizes else None,
            "solver": self.solver.to_dict() if self.solver else None,
        }


@dataclass
class CertificationReport:
    problem: str
    orders: list[OrderResult]
    threshold: float
    mc_value: float | None
    mc_worst_initial: list[float] | None
    verdict: str
    config_hash: str
    monotone: bool = True
    notes: list[str] = field(default_factory=list)
    violating_initial: list[float] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def final_bound(self) -> float:
        ok = [o.bound for o in self.orders if o.status in ("optimal", "near-optimal")]
        return ok[-1] if ok else math.nan

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.verdict, 1)

    def to_dict(self) -> dict:
        timing = {f"d{o.order}": o.cpu for o in self.orders}
        rows = []
        for o in self.orders:
            row = o.to_dict()
            row.pop("cpu_s")
            if row["solver"]:
                row["solver"] = {k: v for k, v in row["solver"].items() if k not in ("iterations",)}
            rows.append(row)
        return {
            "schema": REPORT_SCHEMA,
            "problem": self.problem,
            "config_hash": self.config_hash,
            "orders": rows,
            "final_bound": _num(self.final_bound),
            "monte_carlo": {"worst_cost": _num(self.mc_value), "worst_initial": self.mc_worst_initial},
            "threshold": self.threshold,
            "verdict": self.verdict,
            "violating_initial": self.violating_initial,
            "monotone": self.monotone,
            "notes": self.notes,
            "metadata": {"cpu_s": timing, **self.meta},
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def run_hierarchy(
    prob: ValidationProblem,
    orders: Sequence[int],
    sparse_split: bool | None = None,
    threshold: float = 0.003,
    mc=None,
    opts: Mapping | str | None = None,
    rule: str = "uniform",
    config: Mapping | None = None,
) -> CertificationReport:
    """Solve each order, audit monotonicity, sandwich with ``mc`` and decide.

    ``mc`` is a Monte-Carlo sweep report (anything with ``worst_cost`` and
    ``worst_initial``) or a callable producing one.
    """
    orders = list(orders)
    if not orders:
        raise ValueError("at least one relaxation order is required")
    if any(b <= a for a, b in zip(orders, orders[1:])):
        raise ValueError("relaxation orders must be increasing")
    results: list[OrderResult] = []
    notes: list[str] = []
    for d in orders:
        t0 = time.process_time()
        relax = assemble_relaxation(prob, d, sparse_split, rule=rule)
        cp = ConicProblem.from_relaxation(relax)
        sol = solve(cp, opts)
        cpu = time.process_time() - t0
        log.info("order %d: %s bound=%s (%.1fs)", d, sol.status, sol.bound, cpu)
        results.append(OrderResult(d, sol.bound, cpu, sol.status, relax.block_sizes(), sol))
        if sol.status not in ("optimal", "near-optimal"):
            notes.append(f"order {d}: {sol.status}: {sol.message}")
    monotone = True
    solved = [r for r in results if r.status in ("optimal", "near-optimal")]
    for a, b in zip(solved, solved[1:]):
        if b.bound > a.bound + MONOTONE_TOL:
            monotone = False
            notes.append(f"monotonicity: bound at d={b.order} exceeds d={a.order} by {b.bound - a.bound:.3e}")
    if callable(mc):
        mc = mc()
    mc_value = float(mc.worst_cost) if mc is not None else None
    mc_init = list(mc.worst_initial) if mc is not None else None
    final = solved[-1].bound if solved else math.nan
    if not solved:
        v = "error"
    elif mc_value is None:
        v = "certified" if final <= threshold else "inconclusive"
    else:
        v = verdict(final, mc_value, threshold)
    payload = {"problem": prob.name, "meta": dict(prob.meta), "orders": orders, "rule": rule,
               "threshold": threshold, "config": dict(config or {})}
    chash = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return CertificationReport(
        problem=prob.name,
        orders=results,
        threshold=threshold,
        mc_value=mc_value,
        mc_worst_initial=mc_init,
        verdict=v,
        config_hash=chash,
        monotone=monotone,
        notes=notes,
        violating_initial=mc_init if v == "not-certified" else None,
    )
