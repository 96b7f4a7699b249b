import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import toys
from occuval import f16model as fm
from occuval.liouville import (
    MeasureDecl, RelaxationError, SemialgebraicSet, assemble_relaxation, integrate_against, liouville_rows,
    localizing_matrix, marginal_rows, moment_matrix, trajectory_moments,
)
from occuval import liouville as lv
from occuval.piecewise import Cell, PiecewiseSystem
from occuval.polyalg import MonomialBasis, Polynomial
from occuval.simkit import integrate

X = ("x",)


def x_poly():
    return Polynomial.variable("x", X)


# -- moment and localizing matrices ------------------------------------

def test_moment_matrix_dirac_origin():
    assert moment_matrix([1, 0, 0], 1, X).tolist() == [[1, 0], [0, 0]]


@pytest.mark.parametrize("a", [-0.7, 0.3, 2.0])
def test_moment_matrix_dirac_rank_one(a):
    M = moment_matrix([1, a, a * a], 1, X)
    assert np.allclose(M, [[1, a], [a, a * a]])
    assert np.linalg.matrix_rank(M, tol=1e-12) == 1


def test_moment_matrix_uniform_measure():
    # normalized Lebesgue on [-1, 1]: E[x^k] = 1/(k+1) for even k
    M = moment_matrix([1, 0, 1 / 3], 1, X)
    assert np.allclose(M, [[1, 0], [0, 1 / 3]])
    assert np.linalg.eigvalsh(M).min() > 0


def test_moment_matrix_two_variables_layout():
    y = {e: float(i + 1) for i, e in enumerate(MonomialBasis(("x", "y"), 2))}
    M = moment_matrix(y, 1, ("x", "y"))
    # rows/cols: 1, x, y; entry (x, y) is the xy moment
    assert M[1, 2] == y[(1, 1)] and M[2, 1] == y[(1, 1)]
    assert M[0, 0] == 1.0
    assert np.array_equal(M, M.T)


def test_localizing_constant_is_moment_matrix():
    y = [1.0, 0.2, 0.5, 0.1, 0.4]
    one = Polynomial.constant(1.0, X)
    assert np.array_equal(localizing_matrix(y, one, 2, X), moment_matrix(y, 2, X))


def test_localizing_inside_and_outside():
    g = 1.0 - x_poly() * x_poly()
    assert localizing_matrix([1, 0, 0], g, 1, X).tolist() == [[1.0]]
    assert localizing_matrix([1, 2, 4], g, 1, X).tolist() == [[-3.0]]


def test_localizing_degree_guard():
    g = x_poly() ** 3
    with pytest.raises(RelaxationError):
        localizing_matrix([1, 0, 0], g, 1, X)


def test_moment_vector_length_checked():
    with pytest.raises(RelaxationError):
        moment_matrix([1, 0], 1, X)


# -- test monomials ---------------------------------------------------

def test_uniform_rule_degree():
    vs = lv.test_monomials(("s", "x"), 2, 3)
    assert max(v.degree for v in vs) == 2
    assert len(vs) == math.comb(4, 2)
    assert len(lv.test_monomials(("s", "x"), 1, 1)) == math.comb(4, 2)


def test_generator_rule_keeps_more():
    uni = lv.test_monomials(("s", "a", "b"), 2, 3, [1, 3], "uniform")
    gen = lv.test_monomials(("s", "a", "b"), 2, 3, [1, 3], "generator")
    assert {str(v) for v in uni} <= {str(v) for v in gen}
    assert len(gen) > len(uni)
    with pytest.raises(RelaxationError):
        lv.test_monomials(("s", "x"), 2, 1, rule="fancy")


# -- Liouville and marginal rows --------------------------------------

def _measures(d, states=("x",), inputs=()):
    def decl(name, role, variables, pinned=None, cell=None):
        m = MeasureDecl(name=name, role=role, variables=tuple(variables), support=(), cell=cell,
                        pinned_time=pinned)
        return m

    init = decl("mu0", "initial", states, 0.0)
    occ = decl("mu1", "occupation", ("s",) + states + inputs, cell=0)
    term = decl("muT", "terminal", states, 1.0)
    off = 0
    for m in (init, occ, term):
        m.basis = MonomialBasis(m.variables, 2 * d)
        m.offset = off
        off += len(m.basis)
    return init, occ, term, off


def _unit_velocity():
    u = ("s", "x")
    return PiecewiseSystem("s", ("x",), (Cell(field=(Polynomial.constant(1.0, u),)),))


def test_row_for_constant_test_function():
    sys_ = _unit_velocity()
    init, occ, term, n = _measures(1)
    rows = liouville_rows(sys_, init, [occ], term, 1)
    A = rows.matrix(n).toarray()
    first = A[0]
    want = np.zeros(n)
    want[term.offset] = 1.0
    want[init.offset] = -1.0
    assert np.array_equal(first, want)


def test_row_for_time_test_function():
    sys_ = _unit_velocity()
    init, occ, term, n = _measures(1)
    rows = liouville_rows(sys_, init, [occ], term, 1)
    idx = rows.labels.index("liouville[1, 0]")
    row = rows.matrix(n).toarray()[idx]
    want = np.zeros(n)
    want[term.offset] = 1.0
    want[occ.offset] = -1.0
    assert np.array_equal(row, want)


def test_row_for_state_test_function_matches_trajectory():
    sys_ = _unit_velocity()
    d = 1
    init, occ, term, n = _measures(d)
    rows = liouville_rows(sys_, init, [occ], term, d)
    idx = rows.labels.index("liouville[0, 1]")
    A = rows.matrix(n).toarray()
    # x(s) = s from x(0) = 0: occupation moments are integrals of s^i x^j = 1/(i+j+1)
    y = np.zeros(n)
    y[init.offset] = 1.0
    for k, e in enumerate(term.basis):
        y[term.offset + k] = 1.0 ** sum(e)
    for k, (i, j) in enumerate(occ.basis):
        y[occ.offset + k] = 1.0 / (i + j + 1)
    assert A[idx] @ y == pytest.approx(0.0, abs=1e-15)
    assert np.abs(A @ y).max() < 1e-14
    # the row reads <muT, x> = <mu, 1>
    assert A[idx, term.offset + term.basis.position((1,))] == 1.0
    assert A[idx, occ.offset] == -1.0


def test_marginal_rows_mass_and_tautology():
    d = 1
    init, occ, term, n = _measures(d, inputs=("w",))
    nu = MeasureDecl(name="nu", role="occupation", variables=("s", "w"), support=(), group="reference", cell=0)
    nu.basis = MonomialBasis(nu.variables, 2 * d)
    nu.offset = n
    n += len(nu.basis)
    w_ref = Polynomial.variable("w", ("w",))
    rows = marginal_rows([occ], nu, {"w": w_ref}, d)
    A = rows.matrix(n).toarray()
    assert rows.labels[0] == "marginal[0, 0]"
    assert A[0, occ.offset] == 1.0 and A[0, nu.offset] == -1.0
    # identical clusters through the identity map: equal moment vectors satisfy every row
    rng = np.random.default_rng(3)
    y = np.zeros(n)
    vals = {e: rng.normal() for e in MonomialBasis(("s", "w"), 2 * d)}
    for k, e in enumerate(occ.basis):
        if e[1] == 0:
            y[occ.offset + k] = vals[(e[0], e[2])]
    for k, e in enumerate(nu.basis):
        y[nu.offset + k] = vals[e]
    assert np.abs(A @ y).max() < 1e-14


def test_marginal_rows_missing_variable():
    init, occ, term, n = _measures(1)
    nu = MeasureDecl(name="nu", role="occupation", variables=("s", "w"), support=(), cell=0)
    nu.basis = MonomialBasis(nu.variables, 2)
    nu.offset = n
    with pytest.raises(RelaxationError, match="w"):
        marginal_rows([occ], nu, {"w": Polynomial.variable("w", ("w",))}, 1)


def test_integrate_against_pins_time():
    init, occ, term, n = _measures(1)
    s = Polynomial.variable("s", ("s", "x"))
    x = Polynomial.variable("x", ("s", "x"))
    got = integrate_against(term, (s * x).with_universe(("s", "x")).substitute({"s": 1.0}, ("x",)))
    assert got == {term.offset + term.basis.position((1,)): 1.0}
    big = x ** 5
    with pytest.raises(RelaxationError):
        integrate_against(occ, big)


# -- assembly ---------------------------------------------------------

@pytest.mark.parametrize("d", [2, 3])
def test_lqr_moment_matrix_side(model, d):
    prob = fm.validation_problem(model.with_loop(mode="lqr"))
    relax = assemble_relaxation(prob, d)
    sizes = relax.moment_matrix_sizes()
    assert sizes["mu1"] == math.comb(5 + d, d)
    assert sizes["mu0"] == math.comb(4 + d, d)
    assert relax.largest_block == math.comb(5 + d, d)


def test_order_below_minimum_rejected(model):
    prob = fm.validation_problem(model.with_loop(mode="mrac"))
    need = prob.min_order()
    with pytest.raises(RelaxationError, match=f"minimal admissible order is {need}"):
        assemble_relaxation(prob, need - 1)


def test_sparse_block_smaller_than_dense(model):
    m = model.with_loop(mode="mrac", error_model="approx")
    sp = assemble_relaxation(fm.validation_problem(m, sparse=True), 3)
    dn = assemble_relaxation(fm.validation_problem(m, sparse=False), 3)
    assert sp.largest_block < dn.largest_block
    assert sp.largest_block == math.comb(1 + 4 + 1 + 2 + 3, 3)
    assert dn.largest_block == math.comb(1 + 9 + 3, 3)


def test_sparse_requires_split():
    with pytest.raises(RelaxationError):
        assemble_relaxation(toys.decay(), 2, sparse_split=True)


def test_row_structure_and_mass(model):
    relax = assemble_relaxation(toys.cascade_sparse(1.0), 2)
    labels = relax.row_labels
    assert labels[0] == "mass:mu0"
    assert "mass:nu0" in labels
    assert any(lab.startswith("marginal") for lab in labels)
    assert any(lab.startswith("liouville:reference") for lab in labels)
    assert relax.A_eq.shape == (len(labels), relax.n_vars)


def test_symmetric_blocks():
    relax = assemble_relaxation(toys.cascade_dense(1.0), 2)
    y = np.random.default_rng(1).normal(size=relax.n_vars)
    for b in relax.blocks:
        M = b.evaluate(y)
        assert np.array_equal(M, M.T)


def lines_hash(text):
    return text.splitlines()[0].split("sha256:")[1].strip()


def test_exports_are_stable(tmp_path):
    r1 = assemble_relaxation(toys.decay(), 2)
    r2 = assemble_relaxation(toys.decay(), 2)
    assert r1.to_json() == r2.to_json()
    data = json.loads(r1.to_json())
    assert data["schema"] == "occuval.relaxation/1"
    assert len(data["content_hash"]) == 64
    sdpa = r1.to_sdpa()
    body = sdpa.split("\n", 1)[1]
    assert lines_hash(sdpa) == hashlib.sha256(body.encode()).hexdigest()
    text = r1.to_sdpa(tmp_path / "p.dat-s")
    assert text == r2.to_sdpa()
    lines = text.splitlines()
    assert lines[0].startswith("* content-hash sha256:")
    nblocks = int(lines[3].split()[0])
    assert nblocks == len(r1.blocks) + 1
    assert int(lines[2].split()[0]) == r1.n_vars


def test_sdpa_export_round_trip_matches_relaxation():
    """Parse the SDPA text back and check it encodes the same problem at a random point."""
    relax = assemble_relaxation(toys.decay(), 2)
    lines = [ln for ln in relax.to_sdpa().splitlines() if not ln.startswith(("*", '"'))]
    m = int(lines[0].split()[0])
    nb = int(lines[1].split()[0])
    sizes = [int(v) for v in lines[2].replace(",", " ").replace("{", " ").replace("}", " ").split()[:nb]]
    c = np.array([float(v) for v in lines[3].replace(",", " ").replace("{", " ").replace("}", " ").split()[:m]])
    F = [[np.zeros((abs(s), abs(s))) for s in sizes] for _ in range(m + 1)]
    for ln in lines[4:]:
        k, b, i, j, v = ln.split()
        k, b, i, j, v = int(k), int(b) - 1, int(i) - 1, int(j) - 1, float(v)
        F[k][b][i, j] = v
        F[k][b][j, i] = v
    y = np.random.default_rng(0).normal(size=m)
    # SDPA form: minimize c.y with sum_k F_k y_k - F_0 PSD; objective is the negated maximization
    assert c @ y == pytest.approx(-relax.value(y) + relax.objective_constant, abs=1e-12)
    for bi, blk in enumerate(relax.blocks):
        S = sum(F[k + 1][bi] * y[k] for k in range(m)) - F[0][bi]
        assert np.allclose(S, blk.evaluate(y), atol=1e-12)
    lp = sum(F[k + 1][-1] * y[k] for k in range(m)) - F[0][-1]
    r = relax.A_eq @ y - relax.b_eq
    assert np.allclose(np.sort(np.diag(lp)), np.sort(np.concatenate([r, -r])), atol=1e-12)


# -- Dirac-trajectory feasibility -------------------------------------

def _trajectory_check(prob, relax, sys_, x0, n=20000):
    tr = integrate(sys_, x0, 1.0, 1.0 / n, "rk4")
    states = {v: tr.channel(v) for v in sys_.state_vars}
    mom = trajectory_moments(relax, tr.times, states, tr.cells)
    y = relax.stack(mom)
    return y, tr


def test_decay_trajectory_is_feasible():
    prob = toys.decay()
    relax = assemble_relaxation(prob, 3)
    y, tr = _trajectory_check(prob, relax, prob.system, [1.0])
    assert np.abs(relax.residuals(y)).max() < 5e-4
    assert min(relax.min_eigenvalues(y).values()) >= -1e-6
    assert relax.value(y) == pytest.approx(math.exp(-2), rel=1e-9)


@settings(max_examples=8, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.sampled_from([1.0, 0.314159]))
def test_lqr_trajectory_is_feasible(x0, phi_max):
    model = fm.F16Model.bundled().with_loop(mode="lqr", phi_max=phi_max)
    prob = fm.validation_problem(model)
    relax = assemble_relaxation(prob, 2)
    scale = np.array([model.sets.x0_halfwidth[i] / prob.meta["scales"][v]
                      for i, v in enumerate(fm.PLANT_STATES)])
    y, _ = _trajectory_check(prob, relax, prob.system, np.array(x0) * scale)
    assert np.abs(relax.residuals(y)).max() < 5e-4
    assert min(relax.min_eigenvalues(y).values()) >= -1e-6
