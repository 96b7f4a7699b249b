# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fixed-step integration of piecewise polynomial fields."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite, INFINITY

cnp.import_array()


cdef void _powers(double t, const double* x, Py_ssize_t dim, Py_ssize_t maxdeg, double* pw) noexcept nogil:
    cdef Py_ssize_t v, k, stride = maxdeg + 1
    cdef double val
    for v in range(dim + 1):
        val = t if v == 0 else x[v - 1]
        pw[v * stride] = 1.0
        for k in range(1, maxdeg + 1):
            pw[v * stride + k] = pw[v * stride + k - 1] * val


cdef void _eval(const long long[:, ::1] exps, const double[:, ::1] coefs, Py_ssize_t a, Py_ssize_t b,
                Py_ssize_t ncols, Py_ssize_t dim, Py_ssize_t maxdeg, const double* pw, double* out) noexcept nogil:
    cdef Py_ssize_t i, v, c, stride = maxdeg + 1
    cdef double mono
    for c in range(ncols):
        out[c] = 0.0
    for i in range(a, b):
        mono = 1.0
        for v in range(dim + 1):
            if exps[i, v]:
                mono *= pw[v * stride + exps[i, v]]
        for c in range(ncols):
            out[c] += mono * coefs[i, c]


def integrate_batch(const long long[:, ::1] exps, const double[:, ::1] coefs, const long long[::1] offsets,
                    const long long[::1] nguards, x0, double t0, double dt, Py_ssize_t nsteps, int method,
                    const double[::1] lo, const double[::1] hi, double blowup, record=None, cells=None):
    cdef double[:, ::1] X = np.array(x0, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t m = X.shape[0], dim = X.shape[1], ncells = nguards.shape[0]
    cdef Py_ssize_t ncols = coefs.shape[1]
    cdef Py_ssize_t maxdeg = 0, i, j, k, n, s, cell, best
    for i in range(exps.shape[0]):
        for j in range(exps.shape[1]):
            if exps[i, j] > maxdeg:
                maxdeg = exps[i, j]
    cdef long long[::1] exit_step = np.full(m, -1, dtype=np.int64)
    cdef long long[::1] div_step = np.full(m, -1, dtype=np.int64)
    cdef double[:, :, ::1] rec
    cdef signed char[:, ::1] cel
    cdef bint do_rec = record is not None, do_cel = cells is not None
    if do_rec:
        rec = record
    if do_cel:
        cel = cells
    cdef double[::1] pw = np.empty((dim + 1) * (maxdeg + 1))
    cdef double[::1] buf = np.empty(ncols)
    cdef double[:, ::1] kst = np.empty((4, dim))
    cdef double[::1] xs = np.empty(dim)
    cdef double[::1] xn = np.empty(dim)
    cdef double worst, best_val, t, w
    cdef bint outside, bad
    cdef double ca[4]
    cdef double cb[4]
    ca[0] = 0.0; ca[1] = 0.5; ca[2] = 0.5; ca[3] = 1.0
    cb[0] = 1.0 / 6.0; cb[1] = 1.0 / 3.0; cb[2] = 1.0 / 3.0; cb[3] = 1.0 / 6.0

    with nogil:
        for n in range(m):
            outside = False
            for i in range(dim):
                if X[n, i] < lo[i] or X[n, i] > hi[i]:
                    outside = True
            if outside:
                exit_step[n] = 0
            if do_rec:
                for i in range(dim):
                    rec[n, 0, i] = X[n, i]
            for k in range(nsteps):
                t = t0 + k * dt
                # active cell at the step start, ties to the lower index
                _powers(t, &X[n, 0], dim, maxdeg, &pw[0])
                cell = -1
                best = 0
                best_val = -INFINITY
                for j in range(ncells):
                    _eval(exps, coefs, offsets[j], offsets[j + 1], ncols, dim, maxdeg, &pw[0], &buf[0])
                    worst = 0.0
                    for i in range(nguards[j]):
                        if i == 0 or buf[dim + i] < worst:
                            worst = buf[dim + i]
                    if worst >= 0.0:
                        cell = j
                        break
                    if worst > best_val:
                        best_val = worst
                        best = j
                if cell < 0:
                    cell = best
                if do_cel:
                    cel[n, k] = <signed char>cell
                if method == 0:
                    _eval(exps, coefs, offsets[cell], offsets[cell + 1], ncols, dim, maxdeg, &pw[0], &buf[0])
                    for i in range(dim):
                        xn[i] = X[n, i] + dt * buf[i]
                else:
                    for s in range(4):
                        for i in range(dim):
                            xs[i] = X[n, i] + (ca[s] * dt * kst[s - 1, i] if s > 0 else 0.0)
                        _powers(t + ca[s] * dt, &xs[0], dim, maxdeg, &pw[0])
                        _eval(exps, coefs, offsets[cell], offsets[cell + 1], ncols, dim, maxdeg, &pw[0], &buf[0])
                        for i in range(dim):
                            kst[s, i] = buf[i]
                    for i in range(dim):
                        w = cb[0] * kst[0, i] + cb[1] * kst[1, i] + cb[2] * kst[2, i] + cb[3] * kst[3, i]
                        xn[i] = X[n, i] + dt * w
                bad = False
                for i in range(dim):
                    if not isfinite(xn[i]) or fabs(xn[i]) > blowup:
                        bad = True
                if bad:
                    div_step[n] = k + 1
                    if do_rec:
                        for s in range(k + 1, nsteps + 1):
                            for i in range(dim):
                                rec[n, s, i] = X[n, i]
                    break
                outside = False
                for i in range(dim):
                    X[n, i] = xn[i]
                    if xn[i] < lo[i] or xn[i] > hi[i]:
                        outside = True
                if outside and exit_step[n] < 0:
                    exit_step[n] = k + 1
                if do_rec:
                    for i in range(dim):
                        rec[n, k + 1, i] = X[n, i]
    return np.asarray(X), np.asarray(exit_step), np.asarray(div_step)
