"""Piecewise polynomial vector fields (cells = guard set + field)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .polyalg import Polynomial


@dataclass(frozen=True)
class Cell:
    """One regime: ``field`` is active where every ``guards[k] >= 0``."""

    field: tuple[Polynomial, ...]
    guards: tuple[Polynomial, ...] = ()
    label: str = ""
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return max((f.degree for f in self.field), default=0)


@dataclass(frozen=True)
class PiecewiseSystem:
    time_var: str
    state_vars: tuple[str, ...]
    cells: tuple[Cell, ...]
    input_vars: tuple[str, ...] = ()
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.state_vars)
        for j, cell in enumerate(self.cells):
            if len(cell.field) != n:
                raise ValueError(f"cell {j} has {len(cell.field)} field components, expected {n}")
            for p in tuple(cell.field) + tuple(cell.guards):
                extra = set(p.used_variables()) - set(self.universe)
                if extra:
                    raise ValueError(f"cell {j} uses unknown variable {sorted(extra)[0]!r}")

    @property
    def universe(self) -> tuple[str, ...]:
        return (self.time_var,) + tuple(self.state_vars) + tuple(self.input_vars)

    @property
    def dim(self) -> int:
        return len(self.state_vars)

    @property
    def degree(self) -> int:
        return max(c.degree for c in self.cells)

    def active_cell(self, t: float, x: Sequence[float], inputs: Mapping[str, float] | None = None) -> int:
        """Index of the first cell whose guards hold; boundary ties go to the lower index."""
        point = {self.time_var: t, **dict(zip(self.state_vars, x)), **(inputs or {})}
        best, best_val = 0, -np.inf
        for j, cell in enumerate(self.cells):
            worst = min((g.evaluate(point) for g in cell.guards), default=0.0)
            if worst >= 0.0:
                return j
            if worst > best_val:
                best, best_val = j, worst
        return best

    def evaluate(self, t: float, x: Sequence[float], cell: int | None = None) -> np.ndarray:
        if cell is None:
            cell = self.active_cell(t, x)
        point = {self.time_var: t, **dict(zip(self.state_vars, x))}
        return np.array([f.evaluate(point) for f in self.cells[cell].field])

    def compile(self) -> "CompiledSystem":
        return CompiledSystem.from_system(self)


@dataclass(frozen=True)
class CompiledSystem:
    """Dense-array form of a piecewise field used by the integration kernels.

    Variables are ordered ``(time, *states)``.  Cell ``j`` owns rows
    ``offsets[j]:offsets[j+1]`` of ``exps``/``coefs``; the first ``dim``
    columns of ``coefs`` are field components, the next ``nguards[j]`` are
    guard polynomials.
    """

    dim: int
    exps: np.ndarray  # (nterms, 1 + dim) int64
    coefs: np.ndarray  # (nterms, dim + max_guards) float64
    offsets: np.ndarray  # (ncells + 1,) int64
    nguards: np.ndarray  # (ncells,) int64
    max_degree: int

    @classmethod
    def from_system(cls, sys: PiecewiseSystem) -> "CompiledSystem":
        if sys.input_vars:
            raise ValueError("cannot simulate a system with exogenous inputs " + ", ".join(sys.input_vars))
        universe = (sys.time_var,) + tuple(sys.state_vars)
        n = sys.dim
        max_g = max(len(c.guards) for c in sys.cells)
        rows_e, rows_c, offsets = [], [], [0]
        for cell in sys.cells:
            polys = [p.with_universe(universe) for p in tuple(cell.field) + tuple(cell.guards)]
            tables = [p.terms for p in polys]
            for e in sorted({e for t in tables for e in t}):
                row = np.zeros(n + max_g)
                for k, t in enumerate(tables):
                    row[k] = t.get(e, 0.0)
                rows_e.append(e)
                rows_c.append(row)
            offsets.append(len(rows_e))
        exps = np.array(rows_e, dtype=np.int64).reshape(-1, n + 1)
        coefs = np.array(rows_c, dtype=np.float64).reshape(-1, n + max_g)
        return cls(
            dim=n,
            exps=np.ascontiguousarray(exps),
            coefs=np.ascontiguousarray(coefs),
            offsets=np.array(offsets, dtype=np.int64),
            nguards=np.array([len(c.guards) for c in sys.cells], dtype=np.int64),
            max_degree=int(exps.max()) if exps.size else 0,
        )

    @property
    def ncells(self) -> int:
        return len(self.nguards)
