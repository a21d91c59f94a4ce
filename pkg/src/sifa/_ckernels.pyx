# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled regression kernels; mirrors sifa._pykernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY

cnp.import_array()


def lasso_cd(X, y, double lam, double[::1] beta, col_sq, double tol=1e-7, int max_iter=10000):
    cdef double[::1, :] Xf = np.asfortranarray(X, dtype=np.float64)
    cdef double[::1] cs = np.ascontiguousarray(col_sq, dtype=np.float64)
    cdef double[::1] resid = np.ascontiguousarray(y - np.asarray(X) @ np.asarray(beta), dtype=np.float64)
    cdef Py_ssize_t n = Xf.shape[0], q = Xf.shape[1], i, j
    cdef int sweep, done = max_iter
    cdef double cj, old, new, rho, step, max_step
    with nogil:
        for sweep in range(1, max_iter + 1):
            max_step = 0.0
            for j in range(q):
                cj = cs[j]
                if cj == 0.0:
                    continue
                old = beta[j]
                rho = 0.0
                for i in range(n):
                    rho += Xf[i, j] * resid[i]
                rho = rho / n + cj * old
                if rho > lam:
                    new = (rho - lam) / cj
                elif rho < -lam:
                    new = (rho + lam) / cj
                else:
                    new = 0.0
                if new != old:
                    step = new - old
                    for i in range(n):
                        resid[i] -= Xf[i, j] * step
                    beta[j] = new
                    if fabs(step) > max_step:
                        max_step = fabs(step)
            if max_step < tol:
                done = sweep
                break
    return done


def nw_smooth(X_train, Y, h, X_eval, bint leave_one_out=False):
    cdef double[:, ::1] Xt = np.ascontiguousarray(X_train, dtype=np.float64)
    cdef double[:, ::1] Xe = np.ascontiguousarray(X_eval, dtype=np.float64)
    cdef double[:, ::1] Yc = np.ascontiguousarray(Y, dtype=np.float64)
    cdef double[::1] hinv = 1.0 / np.ascontiguousarray(h, dtype=np.float64)
    cdef Py_ssize_t n = Xt.shape[0], q = Xt.shape[1], m = Xe.shape[0], c = Yc.shape[1]
    out_arr = np.zeros((m, c))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] e = np.empty(n)
    cdef Py_ssize_t i, j, d, col
    cdef double s, t, emin, w, wsum
    with nogil:
        for i in range(m):
            emin = INFINITY
            for j in range(n):
                if leave_one_out and i == j:
                    e[j] = INFINITY
                    continue
                s = 0.0
                for d in range(q):
                    t = (Xe[i, d] - Xt[j, d]) * hinv[d]
                    s += t * t
                e[j] = 0.5 * s
                if e[j] < emin:
                    emin = e[j]
            wsum = 0.0
            for j in range(n):
                if e[j] == INFINITY:
                    continue
                w = exp(emin - e[j])
                wsum += w
                for col in range(c):
                    out[i, col] += w * Yc[j, col]
            for col in range(c):
                out[i, col] /= wsum
    return out_arr
