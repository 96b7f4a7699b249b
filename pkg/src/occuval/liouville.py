"""Moment relaxations of occupation-measure programs.

A :class:`ValidationProblem` (normalized piecewise polynomial dynamics,
initial/admissible/terminal sets and a terminal cost) is compiled into a
:class:`MomentRelaxation`: one truncated moment vector per measure, moment
and localizing matrices as PSD blocks, and linear equality rows coming from
the weak Liouville equation, mass normalization and, for split systems, the
marginal coupling between the plant and an autonomous reference subsystem.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .piecewise import PiecewiseSystem
from .polyalg import MonomialBasis, Polynomial

log = logging.getLogger(__name__)

RELAXATION_SCHEMA = "occuval.relaxation/1"


class RelaxationError(ValueError):
    pass


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{x : g_k(x) >= 0 for all k}`` over ``variables``."""

    variables: tuple[str, ...]
    inequalities: tuple[Polynomial, ...] = ()

    @classmethod
    def box(cls, halfwidths: Mapping[str, float], variables: Sequence[str] | None = None) -> "SemialgebraicSet":
        """Centered box ``a_i^2 - x_i^2 >= 0``, scaled to ``1 - (x_i/a_i)^2 >= 0``."""
        variables = tuple(variables) if variables is not None else tuple(halfwidths)
        ineqs = []
        for v, a in halfwidths.items():
            if not a > 0:
                raise RelaxationError(f"box half-width for {v!r} must be positive")
            x = Polynomial.variable(v, variables)
            ineqs.append(1.0 - (x * x).scale(1.0 / a**2))
        return cls(variables, tuple(ineqs))

    def __and__(self, other: "SemialgebraicSet") -> "SemialgebraicSet":
        variables = self.variables + tuple(v for v in other.variables if v not in self.variables)
        ineqs = tuple(g.with_universe(variables) for g in self.inequalities + other.inequalities)
        return SemialgebraicSet(variables, ineqs)

    def contains(self, point: Mapping[str, float], tol: float = 0.0) -> bool:
        return all(g.evaluate(point) >= -tol for g in self.inequalities)


@dataclass(frozen=True)
class SparseSplit:
    """Autonomous reference subsystem coupled to the plant through outputs ``w``.

    ``coupling`` maps each plant-side input variable to its expression in the
    reference states (the E-map).
    """

    reference: PiecewiseSystem
    coupling: Mapping[str, Polynomial]
    initial: SemialgebraicSet
    state_set: SemialgebraicSet
    terminal: SemialgebraicSet | None = None


@dataclass(frozen=True)
class ValidationProblem:
    system: PiecewiseSystem
    initial: SemialgebraicSet
    state_set: SemialgebraicSet
    terminal: SemialgebraicSet
    terminal_cost: Polynomial
    running_cost: Polynomial | None = None
    split: SparseSplit | None = None
    input_set: SemialgebraicSet | None = None
    name: str = "problem"
    meta: Mapping[str, object] = field(default_factory=dict)

    @property
    def field_degree(self) -> int:
        return self.system.degree

    def min_order(self) -> int:
        degs = [self.field_degree, self.terminal_cost.degree]
        if self.split is not None:
            degs[0] = max(degs[0], self.split.reference.degree)
        if self.running_cost is not None:
            degs.append(self.running_cost.degree)
        need = max(math.ceil(max(dg, 0) / 2) for dg in degs[1:])
        # Liouville rows stay inside the truncation once 2d + 1 - deg f >= 0
        return max(1, need, math.ceil((degs[0] - 1) / 2))


# -- linear matrix forms ------------------------------------------------

@dataclass
class MatrixForm:
    """Symmetric matrix whose entries are linear in a moment vector.

    Entry ``(rows[k], cols[k])`` (upper triangle, ``rows <= cols``) receives
    ``coefs[k] * y[index[k]]``.
    """

    size: int
    rows: np.ndarray
    cols: np.ndarray
    index: np.ndarray
    coefs: np.ndarray
    name: str = ""
    measure: str = ""

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        M = np.zeros((self.size, self.size))
        np.add.at(M, (self.rows, self.cols), self.coefs * np.asarray(y)[self.index])
        iu = np.triu_indices(self.size, 1)
        M[(iu[1], iu[0])] = M[iu]
        return M

    def shifted(self, offset: int) -> "MatrixForm":
        return MatrixForm(self.size, self.rows, self.cols, self.index + offset, self.coefs, self.name, self.measure)


def _localizing_form(g: Polynomial | None, cluster: Sequence[str], d: int, moments: MonomialBasis) -> MatrixForm:
    cluster = tuple(cluster)
    if g is None:
        g_terms = [((0,) * len(cluster), 1.0)]
        dg = 0
    else:
        g = g.with_universe(cluster)
        g_terms = list(g.items())
        dg = g.degree
    half = d - math.ceil(max(dg, 0) / 2)
    basis = MonomialBasis(cluster, half)
    rows, cols, idx, coefs = [], [], [], []
    n = len(basis)
    for i in range(n):
        a = basis[i]
        for j in range(i, n):
            ab = tuple(x + y for x, y in zip(a, basis[j]))
            for gamma, c in g_terms:
                key = tuple(x + y for x, y in zip(ab, gamma))
                try:
                    k = moments.index[key]
                except KeyError:
                    raise RelaxationError(f"moment {key} is outside the degree-{2 * d} truncation") from None
                rows.append(i)
                cols.append(j)
                idx.append(k)
                coefs.append(c)
    return MatrixForm(
        n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
        np.array(idx, dtype=np.int64), np.array(coefs, dtype=float),
    )


def _moment_vector(y, cluster: Sequence[str], d: int) -> np.ndarray:
    basis = MonomialBasis(cluster, 2 * d)
    if isinstance(y, Mapping):
        vec = np.zeros(len(basis))
        for e, val in y.items():
            vec[basis.position(tuple(e))] = val
        return vec
    vec = np.asarray(y, dtype=float)
    if vec.shape != (len(basis),):
        raise RelaxationError(f"moment vector must have {len(basis)} entries for order {d}")
    return vec


def moment_matrix(y, d: int, cluster: Sequence[str]) -> np.ndarray:
    """``M_d(y)[a, b] = y_{a+b}`` for graded-lex basis exponents of degree <= d."""
    form = _localizing_form(None, cluster, d, MonomialBasis(cluster, 2 * d))
    return form.evaluate(_moment_vector(y, cluster, d))


def localizing_matrix(y, g: Polynomial, d: int, cluster: Sequence[str]) -> np.ndarray:
    """``M_{d - ceil(deg g / 2)}(g y)``."""
    if g.degree > 2 * d:
        raise RelaxationError(f"localizing polynomial of degree {g.degree} exceeds order {d}")
    form = _localizing_form(g, cluster, d, MonomialBasis(cluster, 2 * d))
    return form.evaluate(_moment_vector(y, cluster, d))


# -- measures and rows --------------------------------------------------

@dataclass
class MeasureDecl:
    name: str
    role: str  # initial | occupation | terminal
    variables: tuple[str, ...]
    support: tuple[Polynomial, ...]
    group: str = "plant"
    cell: int | None = None
    pinned_time: float | None = None
    time_var: str = "s"
    basis: MonomialBasis | None = None
    offset: int = 0

    @property
    def size(self) -> int:
        return len(self.basis)


@dataclass
class MomentRelaxation:
    order: int
    measures: list[MeasureDecl]
    blocks: list[MatrixForm]
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    row_labels: list[str]
    objective: np.ndarray
    objective_constant: float = 0.0
    sense: str = "max"
    sparse_split: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return len(self.objective)

    def measure(self, name: str) -> MeasureDecl:
        for m in self.measures:
            if m.name == name:
                return m
        raise KeyError(name)

    def block_sizes(self) -> dict[str, int]:
        return {b.name: b.size for b in self.blocks}

    @property
    def largest_block(self) -> int:
        return max(b.size for b in self.blocks)

    def moment_matrix_sizes(self) -> dict[str, int]:
        return {m.name: math.comb(len(m.variables) + self.order, self.order) for m in self.measures}

    def summary(self) -> dict:
        return {
            "order": self.order,
            "sparse": self.sparse_split,
            "n_moments": self.n_vars,
            "n_equalities": int(self.A_eq.shape[0]),
            "n_blocks": len(self.blocks),
            "largest_block": self.largest_block,
            "moment_matrix_sizes": self.moment_matrix_sizes(),
            "clusters": {m.name: list(m.variables) for m in self.measures},
        }

    def stack(self, moments: Mapping[str, np.ndarray]) -> np.ndarray:
        """Concatenate per-measure moment vectors into the global variable vector."""
        y = np.zeros(self.n_vars)
        for m in self.measures:
            if m.name in moments:
                y[m.offset:m.offset + m.size] = moments[m.name]
        return y

    def split(self, y: np.ndarray) -> dict[str, np.ndarray]:
        return {m.name: np.asarray(y[m.offset:m.offset + m.size]) for m in self.measures}

    def residuals(self, y: np.ndarray) -> np.ndarray:
        return self.A_eq @ y - self.b_eq

    def min_eigenvalues(self, y: np.ndarray) -> dict[str, float]:
        return {b.name: float(np.linalg.eigvalsh(b.evaluate(y)).min()) for b in self.blocks}

    def value(self, y: np.ndarray) -> float:
        return float(self.objective @ y + self.objective_constant)

    # -- export ---------------------------------------------------------
    def to_dict(self) -> dict:
        measures = []
        for m in self.measures:
            measures.append({
                "name": m.name, "role": m.role, "group": m.group, "cell": m.cell,
                "variables": list(m.variables), "offset": m.offset,
                "moments": [list(e) for e in m.basis.exponents],
            })
        A = self.A_eq.tocoo()
        rows: list[dict] = [{"label": lab, "rhs": float(b), "terms": []} for lab, b in zip(self.row_labels, self.b_eq)]
        for i, j, v in sorted(zip(A.row.tolist(), A.col.tolist(), A.data.tolist())):
            rows[i]["terms"].append([self._name_of(j), v])
        blocks = []
        for b in self.blocks:
            blocks.append({
                "name": b.name, "measure": b.measure, "size": b.size,
                "entries": [[int(r), int(c), self._name_of(int(k)), float(v)]
                            for r, c, k, v in zip(b.rows, b.cols, b.index, b.coefs)],
            })
        obj = [[self._name_of(int(k)), float(self.objective[k])] for k in np.nonzero(self.objective)[0]]
        body = {
            "schema": RELAXATION_SCHEMA,
            "name": self.name,
            "order": self.order,
            "sense": self.sense,
            "objective": {"terms": obj, "constant": self.objective_constant},
            "measures": measures,
            "equalities": rows,
            "blocks": blocks,
            "summary": self.summary(),
        }
        body["content_hash"] = _content_hash(body)
        return body

    def _name_of(self, k: int) -> list:
        for m in self.measures:
            if m.offset <= k < m.offset + m.size:
                return [m.name, list(m.basis[k - m.offset])]
        raise IndexError(k)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_sdpa(self, path: str | Path | None = None) -> str:
        """Sparse SDPA text: ``min sum c_i x_i`` s.t. ``sum x_i F_i - F_0 >= 0``.

        Equality rows become a diagonal (LP) block of paired inequalities; the
        objective is negated since the relaxation maximizes.
        """
        m = self.n_vars
        A = self.A_eq.tocsc()
        n_eq = A.shape[0]
        sizes = [b.size for b in self.blocks]
        struct = sizes + ([-2 * n_eq] if n_eq else [])
        c = -self.objective if self.sense == "max" else self.objective
        lines = [
            f'"{self.name} order {self.order}; objective constant {self.objective_constant!r}"',
            str(m),
            str(len(struct)),
            " ".join(str(s) for s in struct),
            " ".join(repr(float(v)) for v in c),
        ]
        entries = []
        lp = len(self.blocks) + 1
        for i, b in enumerate(self.b_eq):
            if b != 0.0:
                entries.append((0, lp, 2 * i + 1, 2 * i + 1, float(b)))
                entries.append((0, lp, 2 * i + 2, 2 * i + 2, -float(b)))
        for bi, blk in enumerate(self.blocks, start=1):
            acc: dict[tuple[int, int, int], float] = {}
            for r, cc, k, v in zip(blk.rows, blk.cols, blk.index, blk.coefs):
                key = (int(k), int(r), int(cc))
                acc[key] = acc.get(key, 0.0) + float(v)
            for (k, r, cc), v in acc.items():
                if v != 0.0:
                    entries.append((k + 1, bi, r + 1, cc + 1, v))
        for j in range(m):
            for p in range(A.indptr[j], A.indptr[j + 1]):
                i, v = int(A.indices[p]), float(A.data[p])
                entries.append((j + 1, lp, 2 * i + 1, 2 * i + 1, v))
                entries.append((j + 1, lp, 2 * i + 2, 2 * i + 2, -v))
        entries.sort()
        lines += [f"{k} {b} {i} {j} {v!r}" for k, b, i, j, v in entries]
        text = "\n".join(lines) + "\n"
        digest = hashlib.sha256(text.encode()).hexdigest()
        text = f"* content-hash sha256:{digest}\n" + text
        if path is not None:
            Path(path).write_text(text)
        return text


def _content_hash(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class _RowBuilder:
    def __init__(self):
        self.rows: list[dict[int, float]] = []
        self.rhs: list[float] = []
        self.labels: list[str] = []

    def add(self, coeffs: dict[int, float], rhs: float, label: str):
        coeffs = {k: v for k, v in coeffs.items() if v != 0.0}
        self.rows.append(coeffs)
        self.rhs.append(rhs)
        self.labels.append(label)

    def matrix(self, n: int) -> sparse.csr_matrix:
        data, ri, ci = [], [], []
        for i, row in enumerate(self.rows):
            for k in sorted(row):
                ri.append(i)
                ci.append(k)
                data.append(row[k])
        return sparse.csr_matrix((data, (ri, ci)), shape=(len(self.rows), n))


def integrate_against(measure: MeasureDecl, p: Polynomial, scale: float = 1.0, acc: dict | None = None) -> dict[int, float]:
    """Coefficients of ``<measure, p>`` on the global moment variables."""
    acc = {} if acc is None else acc
    if measure.pinned_time is not None and measure.time_var in p.variables:
        rest = tuple(v for v in p.variables if v != measure.time_var)
        p = p.substitute({measure.time_var: measure.pinned_time}, rest)
    try:
        q = p.with_universe(measure.variables)
    except Exception as exc:
        raise RelaxationError(f"measure {measure.name!r} cannot integrate {p!r}: {exc}") from None
    for exp, c in q.items():
        try:
            k = measure.basis.index[exp]
        except KeyError:
            raise RelaxationError(
                f"moment {exp} of measure {measure.name!r} exceeds the degree-{measure.basis.max_degree} truncation"
            ) from None
        idx = measure.offset + k
        acc[idx] = acc.get(idx, 0.0) + scale * c
    return acc


TEST_RULES = ("uniform", "generator")


def test_monomials(
    variables: Sequence[str],
    d: int,
    field_degree: int,
    component_degrees: Sequence[int] | None = None,
    rule: str = "uniform",
) -> list[Polynomial]:
    """Liouville test monomials ``v(s, x)``; ``variables[0]`` is time.

    ``uniform`` keeps ``deg v <= min(2d, 2d + 1 - deg f)``.  ``generator`` keeps
    every ``v`` of degree <= 2d whose generator ``dv/ds + grad v . f`` has
    degree <= 2d, using the per-component field degrees.
    """
    if rule not in TEST_RULES:
        raise RelaxationError(f"unknown test rule {rule!r}")
    if rule == "uniform" or component_degrees is None:
        top = min(2 * d, 2 * d + 1 - max(field_degree, 1))
        if top < 0:
            return []
        basis = MonomialBasis(variables, top)
        return [basis.polynomial(i) for i in range(len(basis))]
    basis = MonomialBasis(variables, 2 * d)
    out = []
    for i, e in enumerate(basis):
        deg = sum(e)
        gen = deg - 1 if e[0] > 0 else -1
        for k, fk in zip(e[1:], component_degrees):
            if k > 0:
                gen = max(gen, deg - 1 + fk)
        if gen <= 2 * d:
            out.append(basis.polynomial(i))
    return out


def liouville_rows(
    system: PiecewiseSystem,
    initial: MeasureDecl,
    occupations: Sequence[MeasureDecl],
    terminal: MeasureDecl,
    d: int,
    label: str = "liouville",
    builder: _RowBuilder | None = None,
    rule: str = "uniform",
) -> _RowBuilder:
    """``<mu_T, v(1,.)> - <mu_0, v(0,.)> - sum_j <mu_j, dv/ds + grad v . f_j> = 0`` per test monomial."""
    builder = builder or _RowBuilder()
    tvar = system.time_var
    test_vars = (tvar,) + tuple(system.state_vars)
    universe = system.universe
    fields = [[f.with_universe(universe) for f in cell.field] for cell in system.cells]
    if len(occupations) != len(system.cells):
        raise RelaxationError("one occupation measure per cell is required")
    comp = [max(fld[i].degree for fld in fields) for i in range(len(system.state_vars))]
    for v in test_monomials(test_vars, d, system.degree, comp, rule):
        exp = v.sorted_terms()[0][0]
        row: dict[int, float] = {}
        v_u = v.with_universe(universe)
        integrate_against(terminal, v_u.substitute({tvar: 1.0}, system.state_vars), 1.0, row)
        integrate_against(initial, v_u.substitute({tvar: 0.0}, system.state_vars), -1.0, row)
        dv = v_u.differentiate(tvar)
        grads = [v_u.differentiate(x) for x in system.state_vars]
        for occ, fld in zip(occupations, fields):
            gen = dv
            for gi, fi in zip(grads, fld):
                if not gi.is_zero():
                    gen = gen + gi * fi
            integrate_against(occ, gen, -1.0, row)
        builder.add(row, 0.0, f"{label}{list(exp)}")
    return builder


def marginal_rows(
    occupations: Sequence[MeasureDecl],
    reference: MeasureDecl,
    coupling: Mapping[str, Polynomial],
    d: int,
    time_var: str = "s",
    builder: _RowBuilder | None = None,
) -> _RowBuilder:
    """``sum_j <mu_j, m(s, w)> = <nu, m(s, E x_r)>`` for every monomial ``m`` of degree <= 2d."""
    builder = builder or _RowBuilder()
    w_vars = tuple(coupling)
    for occ in occupations:
        missing = [w for w in w_vars if w not in occ.variables]
        if missing:
            raise RelaxationError(f"coupled variable {missing[0]!r} absent from measure {occ.name!r}")
    if time_var not in reference.variables:
        raise RelaxationError(f"time variable {time_var!r} absent from measure {reference.name!r}")
    mvars = (time_var,) + w_vars
    basis = MonomialBasis(mvars, 2 * d)
    ref_universe = reference.variables
    sub = {w: coupling[w].with_universe(ref_universe) for w in w_vars}
    sub[time_var] = Polynomial.variable(time_var, ref_universe)
    for i in range(len(basis)):
        m = basis.polynomial(i)
        row: dict[int, float] = {}
        for occ in occupations:
            integrate_against(occ, m.with_universe(occ.variables), 1.0, row)
        integrate_against(reference, m.substitute(sub, ref_universe), -1.0, row)
        builder.add(row, 0.0, f"marginal{list(basis[i])}")
    return builder


def _box_for(variables: Sequence[str], skip: Iterable[str] = ()) -> list[Polynomial]:
    skip = set(skip)
    out = []
    for v in variables:
        if v in skip:
            continue
        x = Polynomial.variable(v, variables)
        out.append(1.0 - x * x)
    return out


def _supports(base: Sequence[Polynomial], extra: Sequence[Polynomial], variables: Sequence[str]) -> tuple[Polynomial, ...]:
    out = []
    seen = set()
    for g in list(base) + list(extra):
        g = g.with_universe(variables)
        if g not in seen and not (g.degree <= 0):
            seen.add(g)
            out.append(g)
    return tuple(out)


def _declare(name, role, variables, support, group="plant", cell=None, pinned=None, time_var="s"):
    return MeasureDecl(name=name, role=role, variables=tuple(variables), support=tuple(support),
                       group=group, cell=cell, pinned_time=pinned, time_var=time_var)


def assemble_relaxation(
    prob: ValidationProblem, d: int, sparse_split: bool | None = None, rule: str = "uniform"
) -> MomentRelaxation:
    """Build the order-``d`` moment relaxation (maximizes the terminal cost)."""
    if sparse_split is None:
        sparse_split = prob.split is not None
    if sparse_split and prob.split is None:
        raise RelaxationError("sparse assembly requested but the problem has no split descriptor")
    need = prob.min_order()
    if d < need:
        raise RelaxationError(f"relaxation order {d} is too low; minimal admissible order is {need}")
    sys = prob.system
    tvar = sys.time_var
    states = tuple(sys.state_vars)
    inputs = tuple(sys.input_vars)
    if inputs and not sparse_split:
        raise RelaxationError("system has exogenous inputs; a sparse split descriptor is required")

    s = Polynomial.variable(tvar, (tvar,))
    time_support = [(s * (1.0 - s))]
    measures: list[MeasureDecl] = []

    init = _declare("mu0", "initial", states,
                    _supports(_box_for(states), prob.initial.inequalities + prob.state_set.inequalities, states),
                    pinned=0.0, time_var=tvar)
    measures.append(init)
    occ_vars = (tvar,) + states + inputs
    occs = []
    input_box = list(prob.input_set.inequalities) if prob.input_set is not None else []
    for j, cell in enumerate(sys.cells):
        sup = _supports(
            [t.with_universe(occ_vars) for t in time_support] + _box_for(occ_vars, skip=[tvar]),
            list(prob.state_set.inequalities) + list(cell.guards) + input_box,
            occ_vars,
        )
        occ = _declare(f"mu{j + 1}", "occupation", occ_vars, sup, cell=j, time_var=tvar)
        occs.append(occ)
        measures.append(occ)
    term = _declare("muT", "terminal", states,
                    _supports(_box_for(states), prob.terminal.inequalities + prob.state_set.inequalities, states),
                    pinned=1.0, time_var=tvar)
    measures.append(term)

    ref_measures = []
    if sparse_split:
        split = prob.split
        rsys = split.reference
        rstates = tuple(rsys.state_vars)
        r_occ_vars = (rsys.time_var,) + rstates
        nu0 = _declare("nu0", "initial", rstates,
                       _supports(_box_for(rstates), split.initial.inequalities + split.state_set.inequalities, rstates),
                       group="reference", pinned=0.0, time_var=rsys.time_var)
        r_occs = []
        for j, cell in enumerate(rsys.cells):
            sup = _supports(
                [t.with_universe(r_occ_vars) for t in time_support] + _box_for(r_occ_vars, skip=[rsys.time_var]),
                list(split.state_set.inequalities) + list(cell.guards),
                r_occ_vars,
            )
            r_occs.append(_declare("nu" if len(rsys.cells) == 1 else f"nu{j + 1}", "occupation", r_occ_vars, sup,
                                   group="reference", cell=j, time_var=rsys.time_var))
        term_ineqs = split.terminal.inequalities if split.terminal is not None else ()
        nuT = _declare("nuT", "terminal", rstates,
                       _supports(_box_for(rstates), tuple(term_ineqs) + split.state_set.inequalities, rstates),
                       group="reference", pinned=1.0, time_var=rsys.time_var)
        ref_measures = [nu0] + r_occs + [nuT]
        measures.extend(ref_measures)

    offset = 0
    for m in measures:
        m.basis = MonomialBasis(m.variables, 2 * d)
        m.offset = offset
        offset += len(m.basis)
    n = offset

    blocks: list[MatrixForm] = []
    for m in measures:
        mm = _localizing_form(None, m.variables, d, m.basis).shifted(m.offset)
        mm.name, mm.measure = f"{m.name}:moment", m.name
        blocks.append(mm)
        for k, g in enumerate(m.support):
            if g.degree > 2 * d:
                log.warning("skipping localizing constraint %d of %s: degree %d > %d", k, m.name, g.degree, 2 * d)
                continue
            lm = _localizing_form(g, m.variables, d, m.basis).shifted(m.offset)
            lm.name, lm.measure = f"{m.name}:loc{k}", m.name
            blocks.append(lm)

    rows = _RowBuilder()
    one = Polynomial.constant(1.0, ())
    rows.add(integrate_against(init, one), 1.0, "mass:mu0")
    if sparse_split:
        sys_plant = PiecewiseSystem(tvar, states, sys.cells, inputs, sys.meta)
        liouville_rows(sys_plant, init, occs, term, d, "liouville:plant", rows, rule)
        rows.add(integrate_against(ref_measures[0], one), 1.0, "mass:nu0")
        liouville_rows(prob.split.reference, ref_measures[0], ref_measures[1:-1], ref_measures[-1], d,
                       "liouville:reference", rows, rule)
        coupled = {w: prob.split.coupling[w] for w in inputs}
        ref_occ = ref_measures[1]
        if len(ref_measures) != 3:
            raise RelaxationError("the reference subsystem must have a single cell")
        marginal_rows(occs, ref_occ, coupled, d, tvar, rows)
    else:
        liouville_rows(sys, init, occs, term, d, "liouville", rows, rule)

    obj: dict[int, float] = {}
    integrate_against(term, prob.terminal_cost, 1.0, obj)
    if prob.running_cost is not None:
        for occ in occs:
            integrate_against(occ, prob.running_cost, 1.0, obj)
    c = np.zeros(n)
    for k, v in obj.items():
        c[k] = v

    return MomentRelaxation(
        order=d,
        measures=measures,
        blocks=blocks,
        A_eq=rows.matrix(n),
        b_eq=np.array(rows.rhs),
        row_labels=rows.labels,
        objective=c,
        sense="max",
        sparse_split=sparse_split,
        name=prob.name,
        meta={"problem": dict(prob.meta), "test_rule": rule},
    )


# -- trajectory moments (feasibility oracle) ----------------------------

def trajectory_moments(
    relax: MomentRelaxation,
    times: np.ndarray,
    states: Mapping[str, np.ndarray],
    cells: np.ndarray,
    group: str = "plant",
) -> dict[str, np.ndarray]:
    """Moments of the Dirac/occupation measures generated by one sampled trajectory.

    ``times`` must span the normalized horizon ``[0, 1]``; occupation moments use
    trapezoid weights.  ``cells`` holds either one entry per step (the cell that
    drove ``[t_k, t_k+1]``, both panel ends go to that cell) or one per node.
    """
    times = np.asarray(times, dtype=float)
    cells = np.asarray(cells, dtype=int)
    dt = np.diff(times)
    if len(cells) == len(times) - 1:
        # per-step cells: duplicate each node once per panel it closes
        idx = np.concatenate([np.arange(len(dt)), np.arange(1, len(times))])
        w = np.concatenate([0.5 * dt, 0.5 * dt])
        cells = np.concatenate([cells, cells])
    else:
        idx = np.arange(len(times))
        w = np.zeros(len(times))
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    out = {}
    for m in relax.measures:
        if m.group != group:
            continue
        cols = []
        for v in m.variables:
            if v == m.time_var:
                cols.append(times)
            else:
                cols.append(np.asarray(states[v], dtype=float))
        V = np.column_stack(cols) if cols else np.zeros((len(times), 0))
        Vq = V[idx]
        E = np.array(m.basis.exponents, dtype=np.int64)
        if m.role == "initial":
            pts, wts = V[:1], np.array([1.0])
        elif m.role == "terminal":
            pts, wts = V[-1:], np.array([1.0])
        else:
            mask = cells == (m.cell or 0)
            pts, wts = Vq[mask], w[mask]
        mono = np.ones((len(pts), len(E)))
        for i in range(E.shape[1]):
            mono *= pts[:, i:i + 1] ** E[None, :, i]
        out[m.name] = wts @ mono
    return out
