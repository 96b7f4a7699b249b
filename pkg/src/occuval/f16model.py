"""F-16 lateral (dutch-roll) closed loop: plant, LQR baseline and aileron MRAC.

Everything here is expressed as :class:`~occuval.polyalg.Polynomial` vector
fields so the same objects feed the simulator and the moment relaxation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .piecewise import Cell, PiecewiseSystem
from .polyalg import Polynomial, sigmoid_taylor

SCHEMA = "occuval.problem/1"

PLANT_STATES = ("beta", "phi", "p", "r")
WEIGHT = "W"
REF_STATES = ("beta_r", "phi_r", "p_r", "r_r")
TIME = "t"

DEG = math.pi / 180.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PlantMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        if self.A.shape != (4, 4) or self.B.shape != (4, 2) or self.C.shape != (2, 4):
            raise ModelError("plant matrices must be 4x4, 4x2 and 2x4")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlantMatrices":
        return cls(*(np.array(d[k], dtype=float) for k in ("A", "B", "C")))

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}


@dataclass(frozen=True)
class DeltaModel:
    """Coefficients of the dead-zone / effectiveness-loss uncertainty."""

    dead_zone: float
    aileron_terms: tuple[float, ...]
    rudder_terms: tuple[float, ...]
    bias_weights: tuple[float, float]
    p_poly: tuple[float, ...]
    r_poly: tuple[float, ...]

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeltaModel":
        return cls(
            dead_zone=float(d["dead_zone"]),
            aileron_terms=tuple(map(float, d["aileron_terms"])),
            rudder_terms=tuple(map(float, d["rudder_terms"])),
            bias_weights=tuple(map(float, d["bias_weights"])),
            p_poly=tuple(map(float, d["p_poly"])),
            r_poly=tuple(map(float, d["r_poly"])),
        )

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    def __call__(self, x_q: Sequence, u: Sequence) -> list:
        beta, _, p, r = x_q
        effect = 1.0 - self.dead_zone * beta**2
        p_part = sum(c * p**k for k, c in enumerate(self.p_poly))
        r_part = sum(c * r**k for k, c in enumerate(self.r_poly))
        bias = p_part * r_part
        # like terms are kept separate, as printed
        row_a = effect * sum(c * u[0] for c in self.aileron_terms) + self.bias_weights[0] * bias
        row_r = effect * sum(c * u[1] for c in self.rudder_terms) + self.bias_weights[1] * bias
        return [row_a, row_r]


@dataclass(frozen=True)
class GainSet:
    Kx: np.ndarray
    Kr: np.ndarray
    gamma: float = 300.0
    q_scale: float = 100.0
    unity_dc: bool = True

    @classmethod
    def from_dict(cls, d: Mapping) -> "GainSet":
        return cls(
            Kx=np.array(d["Kx"], dtype=float),
            Kr=np.array(d["Kr"], dtype=float),
            gamma=float(d.get("gamma", 300.0)),
            q_scale=float(d.get("q_scale", 100.0)),
            unity_dc=bool(d.get("unity_dc", True)),
        )

    def to_dict(self) -> dict:
        return {
            "Kx": self.Kx.tolist(),
            "Kr": self.Kr.tolist(),
            "gamma": self.gamma,
            "q_scale": self.q_scale,
            "unity_dc": self.unity_dc,
        }


@dataclass(frozen=True)
class LoopConfig:
    mode: str = "lqr"
    phi_max: float = 1.0
    lambdas: tuple[float, float] = (1.0, 0.2)
    command: tuple[float, float] = (0.0, 10 * DEG)
    horizon: float = 10.0
    sigmoid_degree: int = 3
    error_model: str = "exact"

    def __post_init__(self):
        if self.mode not in ("lqr", "mrac"):
            raise ModelError(f"mode must be 'lqr' or 'mrac', got {self.mode!r}")
        if not self.phi_max > 0:
            raise ModelError("phi_max must be positive")
        if not self.horizon > 0:
            raise ModelError("horizon must be positive")
        if any(lam <= 0 for lam in self.lambdas):
            raise ModelError("control effectiveness values must be positive")
        if self.sigmoid_degree not in (1, 3, 5):
            raise ModelError("sigmoid_degree must be 1, 3 or 5")
        if self.error_model not in ("exact", "approx"):
            raise ModelError("error_model must be 'exact' or 'approx'")

    @property
    def state_vars(self) -> tuple[str, ...]:
        if self.mode == "lqr":
            return PLANT_STATES
        return PLANT_STATES + (WEIGHT,) + REF_STATES

    @classmethod
    def from_dict(cls, d: Mapping) -> "LoopConfig":
        cmd = d.get("command")
        if cmd is None:
            cmd = [c * DEG for c in d.get("command_deg", (0.0, 10.0))]
        return cls(
            mode=d.get("mode", "lqr"),
            phi_max=float(d.get("phi_max", 1.0)),
            lambdas=tuple(map(float, d.get("lambdas", (1.0, 0.2)))),
            command=tuple(map(float, cmd)),
            horizon=float(d.get("horizon", 10.0)),
            sigmoid_degree=int(d.get("sigmoid_degree", 3)),
            error_model=d.get("error_model", "exact"),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "phi_max": self.phi_max,
            "lambdas": list(self.lambdas),
            "command": list(self.command),
            "horizon": self.horizon,
            "sigmoid_degree": self.sigmoid_degree,
            "error_model": self.error_model,
        }


@dataclass(frozen=True)
class SetSpec:
    """Box half-widths (radians unless noted) of the initial and admissible sets."""

    x0_halfwidth: tuple[float, ...] = (10 * DEG,) * 4
    w0_halfwidth: float = 0.001
    xr0_halfwidth: float = 0.001 * DEG
    state_halfwidth: float = 30 * DEG
    weight_halfwidth: float = 80.0
    relaxation_halfwidth: float = 60 * DEG
    terminal_threshold: float = 0.003

    @classmethod
    def from_dict(cls, d: Mapping) -> "SetSpec":
        return cls(
            x0_halfwidth=tuple(v * DEG for v in d.get("x0_halfwidth_deg", (10.0,) * 4)),
            w0_halfwidth=float(d.get("w0_halfwidth", 0.001)),
            xr0_halfwidth=float(d.get("xr0_halfwidth_deg", 0.001)) * DEG,
            state_halfwidth=float(d.get("state_halfwidth_deg", 30.0)) * DEG,
            weight_halfwidth=float(d.get("weight_halfwidth", 80.0)),
            relaxation_halfwidth=float(d.get("relaxation_halfwidth_deg", 60.0)) * DEG,
            terminal_threshold=float(d.get("terminal_threshold", 0.003)),
        )

    def to_dict(self) -> dict:
        return {
            "x0_halfwidth_deg": [v / DEG for v in self.x0_halfwidth],
            "w0_halfwidth": self.w0_halfwidth,
            "xr0_halfwidth_deg": self.xr0_halfwidth / DEG,
            "state_halfwidth_deg": self.state_halfwidth / DEG,
            "weight_halfwidth": self.weight_halfwidth,
            "relaxation_halfwidth_deg": self.relaxation_halfwidth / DEG,
            "terminal_threshold": self.terminal_threshold,
        }

    def initial_box(self, mode: str) -> dict[str, float]:
        box = dict(zip(PLANT_STATES, self.x0_halfwidth))
        if mode == "mrac":
            box[WEIGHT] = self.w0_halfwidth
            box.update({v: self.xr0_halfwidth for v in REF_STATES})
        return box

    def state_box(self, mode: str, relaxation: bool = False) -> dict[str, float]:
        a = self.relaxation_halfwidth if relaxation else self.state_halfwidth
        box = {v: a for v in PLANT_STATES}
        if mode == "mrac":
            box[WEIGHT] = self.weight_halfwidth
            box.update({v: a for v in REF_STATES})
        return box


@dataclass(frozen=True)
class SteadyReference:
    x_ss: np.ndarray

    @property
    def beta_ss(self) -> float:
        return float(self.x_ss[0])

    @property
    def r_ss(self) -> float:
        return float(self.x_ss[3])

    def e_map(self, x_r: Sequence) -> list:
        """``x_r -> (beta_ss, phi_r, p_r, r_ss)``."""
        return [self.beta_ss, x_r[1], x_r[2], self.r_ss]


@dataclass(frozen=True)
class F16Model:
    plant: PlantMatrices
    delta: DeltaModel
    gains: GainSet
    loop: LoopConfig = field(default_factory=LoopConfig)
    sets: SetSpec = field(default_factory=SetSpec)
    sweep: Mapping = field(default_factory=lambda: {"grid": [5, 5, 5, 5], "dt": 0.001, "method": "rk4"})
    name: str = "f16-dutchroll"

    # -- loading ------------------------------------------------------
    @classmethod
    def from_dict(cls, d: Mapping) -> "F16Model":
        schema = d.get("schema")
        if schema != SCHEMA:
            raise ModelError(f"unsupported problem schema {schema!r} (expected {SCHEMA!r})")
        return cls(
            plant=PlantMatrices.from_dict(d["plant"]),
            delta=DeltaModel.from_dict(d["delta"]),
            gains=GainSet.from_dict(d["gains"]),
            loop=LoopConfig.from_dict(d.get("loop", {})),
            sets=SetSpec.from_dict(d.get("sets", {})),
            sweep=dict(d.get("sweep", {"grid": [5, 5, 5, 5], "dt": 0.001, "method": "rk4"})),
            name=d.get("name", "unnamed"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "F16Model":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def bundled(cls) -> "F16Model":
        text = resources.files("occuval").joinpath("data/f16-dutchroll.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "plant": self.plant.to_dict(),
            "delta": self.delta.to_dict(),
            "gains": self.gains.to_dict(),
            "loop": self.loop.to_dict(),
            "sets": self.sets.to_dict(),
            "sweep": dict(self.sweep),
        }

    def with_loop(self, **changes) -> "F16Model":
        return replace(self, loop=replace(self.loop, **changes))

    # -- derived quantities -------------------------------------------
    @property
    def feedback_sign(self) -> int:
        return feedback_sign(self.plant, self.gains)

    @property
    def A_r(self) -> np.ndarray:
        return self.plant.A + self.feedback_sign * self.plant.B @ self.gains.Kx

    @property
    def Kr_eff(self) -> np.ndarray:
        """Feedforward gain actually used (printed, or re-solved for unity DC gain)."""
        if not self.gains.unity_dc:
            return self.gains.Kr
        dc = self.plant.C @ np.linalg.solve(-self.A_r, self.plant.B)
        return np.linalg.inv(dc)

    @property
    def B_r(self) -> np.ndarray:
        return self.plant.B @ self.Kr_eff

    @property
    def P(self) -> np.ndarray:
        return solve_lyapunov(self.A_r, self.gains.q_scale * np.eye(4))

    @property
    def b_ail(self) -> np.ndarray:
        return self.plant.B[:, 0].copy()

    def dc_gain(self) -> np.ndarray:
        return self.plant.C @ np.linalg.solve(-self.A_r, self.B_r)


def feedback_sign(plant: PlantMatrices, gains: GainSet) -> int:
    """Sign ``S`` such that ``A + S*B*Kx`` is Hurwitz (the printed sign wins ties)."""
    for s in (1, -1):
        eig = np.linalg.eigvals(plant.A + s * plant.B @ gains.Kx)
        if np.all(eig.real < 0):
            return s
    raise ModelError("neither A + B Kx nor A - B Kx is Hurwitz")


# -- control laws -----------------------------------------------------

def delta_uncertainty(x_q: Sequence, u: Sequence, model: DeltaModel | None = None) -> list:
    """Unknown higher-order actuator dynamics; works on floats or Polynomials."""
    model = model or F16Model.bundled().delta
    return model(x_q, u)


def _matvec(M: np.ndarray, v: Sequence) -> list:
    out = []
    for row in M:
        acc = 0.0
        for a, x in zip(row, v):
            if a != 0.0:
                acc = acc + float(a) * x
        out.append(acc)
    return out


def baseline_control(x_q: Sequence, c: Sequence, model: F16Model | None = None) -> list:
    model = model or F16Model.bundled()
    fb = _matvec(model.feedback_sign * model.gains.Kx, x_q)
    ff = model.Kr_eff @ np.asarray(c, dtype=float)
    return [fb[i] + float(ff[i]) for i in range(2)]


def adaptive_control(x_q: Sequence, W, cfg: LoopConfig | None = None) -> list:
    """Aileron-only adaptive term ``[-W * Phi(phi), 0]``."""
    cfg = cfg or LoopConfig(mode="mrac")
    phi = x_q[1]
    return [-1.0 * W * _sigmoid(phi, cfg.sigmoid_degree), 0.0]


def _sigmoid(x, degree: int):
    """Truncated sigmoid applied to a float or a Polynomial."""
    return sum(c * x ** e[0] for e, c in sigmoid_taylor(degree).terms.items())


def solve_lyapunov(A_r: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A_r^T P + P A_r + Q = 0`` for symmetric positive definite ``P``."""
    A_r = np.asarray(A_r, dtype=float)
    Q = np.asarray(Q, dtype=float)
    eig = np.linalg.eigvals(A_r)
    if np.any(eig.real >= 0):
        raise ModelError(f"A_r is not Hurwitz; eigenvalues {np.round(eig, 6).tolist()}")
    P = linalg.solve_continuous_lyapunov(A_r.T, -Q)
    P = 0.5 * (P + P.T)
    resid = np.abs(A_r.T @ P + P @ A_r + Q).max()
    if resid > 1e-8 * max(1.0, np.abs(Q).max()):
        raise ModelError(f"Lyapunov residual {resid:.3e} too large")
    return P


def weight_update(x_q: Sequence, e: Sequence, P: np.ndarray, model: F16Model | None = None, degree: int = 3):
    """Adaptive weight rate ``gamma * Phi(phi) * e^T P b_ail``."""
    model = model or F16Model.bundled()
    pb = P @ model.b_ail
    proj = 0.0
    for ei, w in zip(e, pb):
        proj = proj + float(w) * ei
    return model.gains.gamma * _sigmoid(x_q[1], degree) * proj


def steady_reference(model: F16Model, c: Sequence | None = None) -> SteadyReference:
    c = np.asarray(model.loop.command if c is None else c, dtype=float)
    try:
        x_ss = np.linalg.solve(model.A_r, -model.B_r @ c)
    except np.linalg.LinAlgError as exc:
        raise ModelError("A_r is singular") from exc
    return SteadyReference(x_ss=x_ss)


# -- closed loop ------------------------------------------------------

def closed_loop_field(model: F16Model, cfg: LoopConfig | None = None) -> PiecewiseSystem:
    """Two-cell polynomial closed loop over ``(t, states)`` in physical units."""
    cfg = cfg or model.loop
    states = cfg.state_vars
    universe = (TIME,) + states
    X = {v: Polynomial.variable(v, universe) for v in states}
    x_q = [X[v] for v in PLANT_STATES]
    c = np.asarray(cfg.command, dtype=float)
    A, B = model.plant.A, model.plant.B

    u = baseline_control(x_q, c, model)
    extra: list[Polynomial] = []
    if cfg.mode == "mrac":
        W = X[WEIGHT]
        x_r = [X[v] for v in REF_STATES]
        u_a = adaptive_control(x_q, W, cfg)
        u = [u[0] + u_a[0], u[1] + u_a[1]]
        if cfg.error_model == "exact":
            ref = x_r
        else:
            ref = steady_reference(model, c).e_map(x_r)
        e = [x_q[i] - ref[i] for i in range(4)]
        w_dot = weight_update(x_q, e, model.P, model, cfg.sigmoid_degree)
        br_c = model.B_r @ c
        xr_dot = [p + float(br_c[i]) for i, p in enumerate(_matvec(model.A_r, x_r))]
        extra = [w_dot] + xr_dot

    d = delta_uncertainty(x_q, u, model.delta)
    drive = [u[0] + d[0], u[1] + d[1]]
    phi = X["phi"]
    guards = (
        (cfg.phi_max**2 - phi * phi,),
        (phi * phi - cfg.phi_max**2,),
    )
    cells = []
    for j, lam in enumerate(cfg.lambdas):
        Ax = _matvec(A, x_q)
        Bu = _matvec(lam * B, drive)
        xq_dot = [Ax[i] + Bu[i] for i in range(4)]
        fld = tuple(_as_poly(p, universe) for p in xq_dot + extra)
        cells.append(Cell(field=fld, guards=guards[j], label=f"cell{j + 1}", params={"lambda": lam}))
    meta = {
        "mode": cfg.mode,
        "feedback_sign": model.feedback_sign,
        "phi_max": cfg.phi_max,
        "error_model": cfg.error_model,
        "sigmoid_degree": cfg.sigmoid_degree,
    }
    return PiecewiseSystem(time_var=TIME, state_vars=states, cells=tuple(cells), meta=meta)


def _as_poly(p, universe) -> Polynomial:
    if isinstance(p, Polynomial):
        return p.with_universe(universe)
    return Polynomial.constant(float(p), universe)


def normalize_system(
    sys: PiecewiseSystem, bounds: Mapping[str, float], T: float, time_var: str = "s"
) -> PiecewiseSystem:
    """Rescale states to ``x/a`` and time to ``s = t/T`` (field becomes ``T D f``)."""
    if not T > 0:
        raise ModelError("horizon must be positive")
    for v, a in bounds.items():
        if not a > 0:
            raise ModelError(f"half-width for {v!r} must be positive, got {a}")
    scaled_vars = tuple(sys.state_vars) + tuple(sys.input_vars)
    universe = (time_var,) + scaled_vars
    sub = {sys.time_var: Polynomial.variable(time_var, universe).scale(T)}
    for v in scaled_vars:
        sub[v] = Polynomial.variable(v, universe).scale(bounds.get(v, 1.0))
    cells = []
    for cell in sys.cells:
        fld = tuple(
            f.substitute(sub, universe).scale(T / bounds.get(v, 1.0)) for f, v in zip(cell.field, sys.state_vars)
        )
        guards = tuple(g.substitute(sub, universe) for g in cell.guards)
        cells.append(Cell(field=fld, guards=guards, label=cell.label, params=dict(cell.params)))
    meta = dict(sys.meta)
    meta.update(normalized=True, horizon=T, scales={v: bounds.get(v, 1.0) for v in scaled_vars})
    return PiecewiseSystem(
        time_var=time_var, state_vars=sys.state_vars, cells=tuple(cells), input_vars=sys.input_vars, meta=meta
    )


# -- validation problems ----------------------------------------------

COUPLED = {"phi_r": "w_phi", "p_r": "w_p"}


def reference_system(model: F16Model, cfg: LoopConfig | None = None) -> PiecewiseSystem:
    """Autonomous reference model ``x_r' = A_r x_r + B_r c`` over ``(t, x_r)``."""
    cfg = cfg or model.loop
    universe = (TIME,) + REF_STATES
    x_r = [Polynomial.variable(v, universe) for v in REF_STATES]
    br_c = model.B_r @ np.asarray(cfg.command, dtype=float)
    fld = tuple(_as_poly(p + float(br_c[i]), universe) for i, p in enumerate(_matvec(model.A_r, x_r)))
    return PiecewiseSystem(TIME, REF_STATES, (Cell(field=fld, label="reference"),), meta={"mode": "reference"})


def _plant_split(sys: PiecewiseSystem) -> PiecewiseSystem:
    """Plant part of an approximate-error MRAC loop, reference outputs renamed to inputs."""
    plant_vars = PLANT_STATES + (WEIGHT,)
    inputs = tuple(COUPLED.values())
    universe = (TIME,) + plant_vars + inputs
    ren = {v: Polynomial.variable(w, universe) for v, w in COUPLED.items()}
    cells = []
    for cell in sys.cells:
        fld = []
        for v, f in zip(sys.state_vars, cell.field):
            if v not in plant_vars:
                continue
            used = set(f.used_variables()) - set(universe) - set(COUPLED)
            if used:
                raise ModelError(f"plant field depends on {sorted(used)[0]!r}; use the approximate error model")
            fld.append(f.substitute(ren, universe))
        guards = tuple(g.with_universe(universe) if not set(g.used_variables()) & set(COUPLED)
                       else g.substitute(ren, universe) for g in cell.guards)
        cells.append(Cell(field=tuple(fld), guards=guards, label=cell.label, params=dict(cell.params)))
    return PiecewiseSystem(TIME, plant_vars, tuple(cells), input_vars=inputs, meta=dict(sys.meta))


def validation_problem(model: F16Model, cfg: LoopConfig | None = None, sparse: bool | None = None):
    """Normalized occupation-measure problem for the configured loop.

    States are scaled by the relaxation box half-widths and time by the
    horizon.  ``sparse`` (MRAC only, default on) splits off the reference
    model and couples it through ``(phi_r, p_r)``; it implies the
    approximate error model.
    """
    from .liouville import SemialgebraicSet, SparseSplit, ValidationProblem

    cfg = cfg or model.loop
    if sparse is None:
        sparse = cfg.mode == "mrac"
    if sparse and cfg.mode != "mrac":
        raise ModelError("the sparse split applies to the MRAC loop only")
    if sparse and cfg.error_model != "approx":
        cfg = replace(cfg, error_model="approx")
    T = cfg.horizon
    bounds = model.sets.state_box(cfg.mode, relaxation=True)
    init_half = model.sets.initial_box(cfg.mode)
    full = closed_loop_field(model, cfg)

    def unit(v):
        return Polynomial.variable(v, (v,))

    def init_set(names):
        ineqs = tuple((init_half[v] / bounds[v]) ** 2 - unit(v) * unit(v) for v in names)
        return SemialgebraicSet(tuple(names), tuple(g.with_universe(names) for g in ineqs))

    def box_set(names):
        return SemialgebraicSet.box({v: 1.0 for v in names}, names)

    c = np.asarray(cfg.command, dtype=float)
    a_b, a_p = bounds["beta"], bounds["phi"]
    plant_vars = PLANT_STATES + ((WEIGHT,) if cfg.mode == "mrac" else ())
    if sparse:
        plant = _plant_split(full)
        for w, v in zip(COUPLED.values(), COUPLED):
            bounds[w] = bounds[v]
        sys_n = normalize_system(plant, bounds, T)
        ref_n = normalize_system(reference_system(model, cfg), bounds, T)
        coupling = {w: Polynomial.variable(v, REF_STATES) for v, w in COUPLED.items()}
        split = SparseSplit(
            reference=ref_n,
            coupling=coupling,
            initial=init_set(REF_STATES),
            state_set=box_set(REF_STATES),
        )
        names = plant_vars
    else:
        sys_n = normalize_system(full, bounds, T)
        split = None
        names = cfg.state_vars
    xs = tuple(names)
    beta = Polynomial.variable("beta", xs)
    phi = Polynomial.variable("phi", xs)
    e1 = float(c[0]) - beta.scale(a_b)
    e2 = float(c[1]) - phi.scale(a_p)
    h_T = e1 * e1 + e2 * e2
    meta = {
        "mode": cfg.mode,
        "phi_max": cfg.phi_max,
        "sparse": bool(sparse),
        "error_model": cfg.error_model,
        "sigmoid_degree": cfg.sigmoid_degree,
        "horizon": T,
        "scales": {k: float(v) for k, v in bounds.items()},
        "command": c.tolist(),
    }
    return ValidationProblem(
        system=sys_n,
        initial=init_set(xs),
        state_set=box_set(xs),
        terminal=box_set(xs),
        terminal_cost=h_T,
        split=split,
        name=f"{model.name}:{cfg.mode}:phi_max={cfg.phi_max:g}:{'sparse' if sparse else 'dense'}",
        meta=meta,
    )
