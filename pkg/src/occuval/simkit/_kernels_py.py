"""Pure NumPy integration kernel, vectorised across trajectories.

Same contract as the compiled ``_kernels.integrate_batch``.
"""
from __future__ import annotations

import numpy as np


def _monomials(exps, maxdeg, t, X):
    m, dim = X.shape
    nv = dim + 1
    V = np.empty((m, nv))
    V[:, 0] = t
    V[:, 1:] = X
    pw = np.ones((m, nv, maxdeg + 1))
    for k in range(1, maxdeg + 1):
        pw[:, :, k] = pw[:, :, k - 1] * V
    return pw[:, np.arange(nv)[None, :], exps].prod(axis=2)


def _select(exps, coefs, offsets, nguards, dim, maxdeg, t, X):
    mono = _monomials(exps, maxdeg, t, X)
    ncells = len(nguards)
    m = X.shape[0]
    chosen = np.full(m, -1, dtype=np.int64)
    best = np.zeros(m, dtype=np.int64)
    best_val = np.full(m, -np.inf)
    for j in range(ncells):
        a, b = offsets[j], offsets[j + 1]
        ng = nguards[j]
        if ng:
            g = mono[:, a:b] @ coefs[a:b, dim:dim + ng]
            worst = g.min(axis=1)
        else:
            worst = np.zeros(m)
        ok = (worst >= 0.0) & (chosen < 0)
        chosen[ok] = j
        better = worst > best_val
        best[better] = j
        best_val[better] = worst[better]
    chosen[chosen < 0] = best[chosen < 0]
    return chosen


def _field(exps, coefs, offsets, dim, maxdeg, t, X, cell):
    mono = _monomials(exps, maxdeg, t, X)
    out = np.zeros_like(X)
    for j in np.unique(cell):
        a, b = offsets[j], offsets[j + 1]
        rows = cell == j
        out[rows] = mono[rows, a:b] @ coefs[a:b, :dim]
    return out


def integrate_batch(exps, coefs, offsets, nguards, x0, t0, dt, nsteps, method, lo, hi, blowup,
                    record=None, cells=None):
    exps = np.asarray(exps, dtype=np.int64)
    coefs = np.asarray(coefs, dtype=np.float64)
    X = np.array(x0, dtype=np.float64, copy=True)
    m, dim = X.shape
    maxdeg = int(exps.max()) if exps.size else 0
    alive = np.ones(m, dtype=bool)
    exit_step = np.full(m, -1, dtype=np.int64)
    div_step = np.full(m, -1, dtype=np.int64)

    def check(k):
        out = ((X < lo) | (X > hi)).any(axis=1) & (exit_step < 0)
        exit_step[out] = k

    check(0)
    if record is not None:
        record[:, 0, :] = X
    for k in range(nsteps):
        t = t0 + k * dt
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        Xa = X[idx]
        cell = _select(exps, coefs, offsets, nguards, dim, maxdeg, t, Xa)
        if cells is not None:
            cells[idx, k] = cell
        f = lambda tt, Y: _field(exps, coefs, offsets, dim, maxdeg, tt, Y, cell)
        if method == 0:
            Xn = Xa + dt * f(t, Xa)
        else:
            k1 = f(t, Xa)
            k2 = f(t + 0.5 * dt, Xa + 0.5 * dt * k1)
            k3 = f(t + 0.5 * dt, Xa + 0.5 * dt * k2)
            k4 = f(t + dt, Xa + dt * k3)
            Xn = Xa + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = ~np.isfinite(Xn).all(axis=1) | (np.abs(Xn) > blowup).any(axis=1)
        good = idx[~bad]
        X[good] = Xn[~bad]
        div_step[idx[bad]] = k + 1
        alive[idx[bad]] = False
        out = ((X[good] < lo) | (X[good] > hi)).any(axis=1) & (exit_step[good] < 0)
        exit_step[good[out]] = k + 1
        if record is not None:
            record[:, k + 1, :] = X
    return X, exit_step, div_step
