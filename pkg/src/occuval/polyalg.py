"""Sparse multivariate polynomials with real coefficients.

A :class:`Polynomial` lives over an ordered *universe* of variable names and
stores its terms as a mapping from exponent tuples (aligned with the universe)
to float coefficients.  Values are immutable once built.
"""
from __future__ import annotations

import json
import math
from numbers import Real
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Sequence

ZERO_TOL = 1e-15

Exponent = tuple  # tuple[int, ...] aligned with a universe


class UniverseError(ValueError):
    """Raised when two polynomials do not share a compatible variable universe."""


@dataclass(frozen=True)
class Monomial:
    """Sparse monomial: sorted ``(variable, power)`` pairs, no zero powers."""

    powers: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        for var, k in self.powers:
            if k <= 0:
                raise ValueError(f"non-positive power {k} for {var!r}")

    @classmethod
    def from_map(cls, exps: Mapping[str, int]) -> "Monomial":
        return cls(tuple(sorted((v, int(k)) for v, k in exps.items() if k)))

    @property
    def degree(self) -> int:
        return sum(k for _, k in self.powers)

    def as_dict(self) -> dict[str, int]:
        return dict(self.powers)

    def __str__(self):
        if not self.powers:
            return "1"
        return "*".join(v if k == 1 else f"{v}^{k}" for v, k in self.powers)


def _check_universe(variables: Sequence[str]) -> tuple[str, ...]:
    variables = tuple(variables)
    if len(set(variables)) != len(variables):
        raise UniverseError(f"duplicate variables in universe {variables}")
    return variables


class Polynomial:
    """Immutable sparse polynomial over an ordered variable universe."""

    __slots__ = ("_vars", "_terms", "_index", "_hash")

    def __init__(self, variables: Sequence[str], terms: Mapping[Exponent, float] | None = None):
        self._vars = _check_universe(variables)
        self._index = {v: i for i, v in enumerate(self._vars)}
        n = len(self._vars)
        clean: dict[Exponent, float] = {}
        for exp, c in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != n:
                raise ValueError(f"exponent {exp} does not match universe of size {n}")
            if any(e < 0 for e in exp):
                raise ValueError(f"negative exponent in {exp}")
            c = float(c)
            if abs(c) >= ZERO_TOL:
                clean[exp] = clean.get(exp, 0.0) + c
        self._terms = {e: c for e, c in clean.items() if abs(c) >= ZERO_TOL}
        self._hash = None

    # -- construction -------------------------------------------------
    @classmethod
    def constant(cls, value: float, variables: Sequence[str] = ()) -> "Polynomial":
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def variable(cls, name: str, variables: Sequence[str]) -> "Polynomial":
        variables = tuple(variables)
        if name not in variables:
            raise UniverseError(f"variable {name!r} not in universe {variables}")
        exp = tuple(1 if v == name else 0 for v in variables)
        return cls(variables, {exp: 1.0})

    @classmethod
    def from_monomials(cls, variables: Sequence[str], items: Iterable[tuple[Monomial | Mapping[str, int], float]]):
        variables = _check_universe(variables)
        idx = {v: i for i, v in enumerate(variables)}
        terms: dict[Exponent, float] = {}
        for mono, c in items:
            pw = mono.as_dict() if isinstance(mono, Monomial) else dict(mono)
            exp = [0] * len(variables)
            for v, k in pw.items():
                if v not in idx:
                    raise UniverseError(f"variable {v!r} not in universe {variables}")
                exp[idx[v]] = k
            exp = tuple(exp)
            terms[exp] = terms.get(exp, 0.0) + c
        return cls(variables, terms)

    # -- accessors ----------------------------------------------------
    @property
    def variables(self) -> tuple[str, ...]:
        return self._vars

    @property
    def terms(self) -> dict[Exponent, float]:
        return dict(self._terms)

    def items(self) -> Iterator[tuple[Exponent, float]]:
        return iter(self._terms.items())

    def monomials(self) -> Iterator[tuple[Monomial, float]]:
        for exp, c in self._terms.items():
            yield Monomial(tuple((v, k) for v, k in zip(self._vars, exp) if k)), c

    def __len__(self):
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(e) for e in self._terms), default=-1)

    def degree_in(self, var: str) -> int:
        i = self._index[var]
        return max((e[i] for e in self._terms), default=-1)

    def used_variables(self) -> tuple[str, ...]:
        used = [False] * len(self._vars)
        for exp in self._terms:
            for i, k in enumerate(exp):
                if k:
                    used[i] = True
        return tuple(v for v, u in zip(self._vars, used) if u)

    def coefficient(self, mono: Monomial | Mapping[str, int]) -> float:
        pw = mono.as_dict() if isinstance(mono, Monomial) else dict(mono)
        exp = [0] * len(self._vars)
        for v, k in pw.items():
            if v not in self._index:
                return 0.0
            exp[self._index[v]] = k
        return self._terms.get(tuple(exp), 0.0)

    # -- universe handling --------------------------------------------
    def with_universe(self, variables: Sequence[str]) -> "Polynomial":
        """Re-express over another universe that contains every used variable."""
        variables = _check_universe(variables)
        if variables == self._vars:
            return self
        pos = {v: i for i, v in enumerate(variables)}
        used = set(self.used_variables())
        for v in used:
            if v not in pos:
                raise UniverseError(f"variable {v!r} is used but missing from target universe {variables}")
        keep = [(i, pos[v]) for i, v in enumerate(self._vars) if v in pos]
        terms = {}
        for exp, c in self._terms.items():
            new = [0] * len(variables)
            for i, j in keep:
                new[j] = exp[i]
            terms[tuple(new)] = c
        return Polynomial(variables, terms)

    def _aligned(self, other: "Polynomial") -> tuple["Polynomial", "Polynomial"]:
        if self._vars == other._vars:
            return self, other
        a, b = set(self._vars), set(other._vars)
        if b <= a:
            return self, other.with_universe(self._vars)
        if a <= b:
            return self.with_universe(other._vars), other
        bad = sorted((a - b) | (b - a))[0]
        raise UniverseError(f"incompatible universes: variable {bad!r} appears in only one operand")

    @staticmethod
    def _coerce(value, like: "Polynomial") -> "Polynomial":
        if isinstance(value, Polynomial):
            return value
        if isinstance(value, Real):
            return Polynomial.constant(float(value), like._vars)
        return NotImplemented

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other):
        other = self._coerce(other, self)
        if other is NotImplemented:
            return other
        p, q = self._aligned(other)
        terms = dict(p._terms)
        for e, c in q._terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Polynomial(p._vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self._vars, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other, self)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, alpha: float) -> "Polynomial":
        return Polynomial(self._vars, {e: alpha * c for e, c in self._terms.items()})

    def __mul__(self, other):
        if isinstance(other, Real):
            return self.scale(float(other))
        if not isinstance(other, Polynomial):
            return NotImplemented
        p, q = self._aligned(other)
        terms: dict[Exponent, float] = {}
        for e1, c1 in p._terms.items():
            for e2, c2 in q._terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                terms[e] = terms.get(e, 0.0) + c1 * c2
        return Polynomial(p._vars, terms)

    def __rmul__(self, other):
        if isinstance(other, Real):
            return self.scale(float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = Polynomial.constant(1.0, self._vars)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other):
        if isinstance(other, Real):
            other = Polynomial.constant(float(other), self._vars)
        if not isinstance(other, Polynomial):
            return NotImplemented
        try:
            p, q = self._aligned(other)
        except UniverseError:
            return False
        return p._terms == q._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self._vars, frozenset(self._terms.items())))
        return self._hash

    def allclose(self, other: "Polynomial", tol: float = 1e-12) -> bool:
        """Termwise comparison with an absolute tolerance."""
        p, q = self._aligned(other)
        keys = set(p._terms) | set(q._terms)
        return all(abs(p._terms.get(k, 0.0) - q._terms.get(k, 0.0)) <= tol for k in keys)

    # -- calculus and evaluation --------------------------------------
    def differentiate(self, var: str) -> "Polynomial":
        if var not in self._index:
            raise UniverseError(f"variable {var!r} not in universe {self._vars}")
        i = self._index[var]
        terms = {}
        for exp, c in self._terms.items():
            k = exp[i]
            if k:
                new = list(exp)
                new[i] = k - 1
                terms[tuple(new)] = c * k
        return Polynomial(self._vars, terms)

    def evaluate(self, point: Mapping[str, float]) -> float:
        values = []
        for v in self._vars:
            if v in point:
                values.append(float(point[v]))
            elif self.degree_in(v) > 0:
                raise KeyError(f"no value assigned to variable {v!r}")
            else:
                values.append(0.0)
        total = 0.0
        for exp, c in self._terms.items():
            term = c
            for x, k in zip(values, exp):
                if k:
                    term *= x**k
            total += term
        return total

    __call__ = evaluate

    def evaluate_array(self, points, order: Sequence[str] | None = None):
        """Vectorised evaluation; ``points`` has one column per name in ``order``."""
        import numpy as np

        pts = np.atleast_2d(np.asarray(points, dtype=float))
        order = tuple(order) if order is not None else self._vars
        col = {v: i for i, v in enumerate(order)}
        out = np.zeros(pts.shape[0])
        for exp, c in self._terms.items():
            term = np.full(pts.shape[0], c)
            for v, k in zip(self._vars, exp):
                if k:
                    if v not in col:
                        raise KeyError(f"no value assigned to variable {v!r}")
                    term = term * pts[:, col[v]] ** k
            out += term
        return out

    def substitute(self, mapping: Mapping[str, "Polynomial | float"], variables: Sequence[str] | None = None) -> "Polynomial":
        """Compose: replace each mapped variable by a polynomial.

        Unmapped variables are kept.  The result lives over ``variables`` when
        given, otherwise over the union of kept variables and the universes of
        the replacement polynomials.
        """
        if variables is None:
            universe = [v for v in self._vars if v not in mapping]
            for rep in mapping.values():
                if isinstance(rep, Polynomial):
                    universe += [v for v in rep.variables if v not in universe]
            variables = universe
        variables = _check_universe(variables)
        reps: list[Polynomial] = []
        for v in self._vars:
            if v in mapping:
                rep = mapping[v]
                if not isinstance(rep, Polynomial):
                    rep = Polynomial.constant(float(rep), variables)
                reps.append(rep.with_universe(variables))
            elif self.degree_in(v) > 0:
                reps.append(Polynomial.variable(v, variables))
            else:
                reps.append(None)
        powers: dict[tuple[int, int], Polynomial] = {}

        def power(i: int, k: int) -> Polynomial:
            key = (i, k)
            if key not in powers:
                powers[key] = reps[i] if k == 1 else power(i, k - 1) * reps[i]
            return powers[key]

        acc: dict[Exponent, float] = {}
        for exp, c in self._terms.items():
            term = Polynomial.constant(c, variables)
            for i, k in enumerate(exp):
                if k:
                    term = term * power(i, k)
            for e, tc in term._terms.items():
                acc[e] = acc.get(e, 0.0) + tc
        return Polynomial(variables, acc)

    # -- presentation -------------------------------------------------
    def sorted_terms(self) -> list[tuple[Exponent, float]]:
        """Terms in graded-lex order (degree ascending, lex descending)."""
        return sorted(self._terms.items(), key=lambda t: (sum(t[0]), tuple(-k for k in t[0])))

    def __repr__(self):
        if not self._terms:
            return "0"
        parts = []
        for mono, c in sorted(self.monomials(), key=lambda t: (t[0].degree, str(t[0]))):
            parts.append(f"{c:+.6g}" + ("" if not mono.powers else "*" + str(mono)))
        return " ".join(parts)

    def to_records(self) -> list[dict]:
        return [
            {"exponents": [[v, k] for v, k in zip(self._vars, exp) if k], "coeff": c}
            for exp, c in self.sorted_terms()
        ]

    def to_json(self) -> str:
        return json.dumps({"variables": list(self._vars), "terms": self.to_records()})

    @classmethod
    def from_records(cls, variables: Sequence[str], records: Iterable[Mapping]) -> "Polynomial":
        return cls.from_monomials(
            variables, ((dict((v, int(k)) for v, k in r["exponents"]), float(r["coeff"])) for r in records)
        )

    @classmethod
    def from_json(cls, text: str) -> "Polynomial":
        data = json.loads(text)
        return cls.from_records(data["variables"], data["terms"])


def poly_arith(p: Polynomial, q: Polynomial | float, op: str) -> Polynomial:
    if op == "add":
        return p + q
    if op == "sub":
        return p - q
    if op == "mul":
        return p * q
    if op == "scale":
        return p.scale(float(q))
    raise ValueError(f"unknown operation {op!r}")


def differentiate(p: Polynomial, var: str) -> Polynomial:
    return p.differentiate(var)


def evaluate(p: Polynomial, point: Mapping[str, float]) -> float:
    return p.evaluate(point)


def substitute(p: Polynomial, mapping: Mapping[str, Polynomial | float], variables=None) -> Polynomial:
    return p.substitute(mapping, variables)


def variables(names: Sequence[str]) -> list[Polynomial]:
    """Convenience: one polynomial per name, all over the same universe."""
    names = tuple(names)
    return [Polynomial.variable(n, names) for n in names]


# Maclaurin coefficients of 1/(1+e^x); even powers >= 2 vanish.
_SIGMOID_COEFFS = {0: 0.5, 1: -0.25, 3: 1.0 / 48.0, 5: -1.0 / 480.0}


def sigmoid_taylor(degree: int = 3, var: str = "x", universe: Sequence[str] | None = None) -> Polynomial:
    """Truncated Maclaurin series of ``(1 + exp(x))**-1``."""
    if degree not in (1, 3, 5):
        raise ValueError(f"unsupported sigmoid degree {degree}; choose 1, 3 or 5")
    universe = tuple(universe) if universe is not None else (var,)
    x = Polynomial.variable(var, universe)
    out = Polynomial.constant(0.0, universe)
    for k, c in _SIGMOID_COEFFS.items():
        if k <= degree:
            out = out + (x**k).scale(c)
    return out


# -- graded-lex monomial bases ----------------------------------------

@lru_cache(maxsize=None)
def _exponents_of_degree(n: int, k: int) -> tuple[Exponent, ...]:
    """All exponent vectors of total degree k in n variables, lex-descending."""
    if n == 0:
        return ((),) if k == 0 else ()
    if n == 1:
        return ((k,),)
    out = []
    for first in range(k, -1, -1):
        for rest in _exponents_of_degree(n - 1, k - first):
            out.append((first,) + rest)
    return tuple(out)


@lru_cache(maxsize=None)
def graded_exponents(n: int, d: int) -> tuple[Exponent, ...]:
    out: list[Exponent] = []
    for k in range(d + 1):
        out.extend(_exponents_of_degree(n, k))
    return tuple(out)


class MonomialBasis:
    """All monomials of degree <= d in ``variables``, graded-lex ordered."""

    def __init__(self, variables: Sequence[str], max_degree: int):
        if max_degree < 0:
            raise ValueError("max_degree must be non-negative")
        self.variables = tuple(variables)
        self.max_degree = int(max_degree)
        self.exponents = graded_exponents(len(self.variables), self.max_degree)
        self.index = {e: i for i, e in enumerate(self.exponents)}

    def __len__(self):
        return len(self.exponents)

    def __iter__(self):
        return iter(self.exponents)

    def __getitem__(self, i: int) -> Exponent:
        return self.exponents[i]

    def position(self, exp: Exponent) -> int:
        return self.index[tuple(exp)]

    def __contains__(self, exp) -> bool:
        return tuple(exp) in self.index

    def polynomial(self, i: int) -> Polynomial:
        return Polynomial(self.variables, {self.exponents[i]: 1.0})

    @staticmethod
    def expected_size(n: int, d: int) -> int:
        return math.comb(n + d, d)
