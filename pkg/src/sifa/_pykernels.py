"""Pure-Python implementations of the hot regression kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or when ``SIFA_PURE_PYTHON=1``.
"""
import numpy as np


def lasso_cd(X, y, lam, beta, col_sq, tol=1e-7, max_iter=10000):
    """Cyclic coordinate descent for (1/2n)||y - X b||^2 + lam ||b||_1.

    ``beta`` is updated in place (warm start).  Columns with ``col_sq == 0``
    are skipped.  Returns the number of sweeps performed.
    """
    n, q = X.shape
    resid = y - X @ beta
    for sweep in range(1, max_iter + 1):
        max_step = 0.0
        for j in range(q):
            cj = col_sq[j]
            if cj == 0.0:
                continue
            old = beta[j]
            rho = X[:, j] @ resid / n + cj * old
            if rho > lam:
                new = (rho - lam) / cj
            elif rho < -lam:
                new = (rho + lam) / cj
            else:
                new = 0.0
            if new != old:
                resid -= X[:, j] * (new - old)
                beta[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step < tol:
            return sweep
    return max_iter


def nw_smooth(X_train, Y, h, X_eval, leave_one_out=False):
    """Gaussian-kernel Nadaraya-Watson smoother.

    Returns the m x c matrix of kernel-weighted means of the columns of ``Y``
    (n x c) at each row of ``X_eval`` (m x q).  Exponents are shifted by their
    per-row minimum so weights never all underflow.  With ``leave_one_out``
    the evaluation points are the training points and each point's own
    weight is dropped.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_eval = np.asarray(X_eval, dtype=float)
    h = np.asarray(h, dtype=float)
    m = X_eval.shape[0]
    out = np.empty((m, Y.shape[1]))
    chunk = max(1, 2_000_000 // max(X_train.shape[0], 1))
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        diff = (X_eval[start:stop, None, :] - X_train[None, :, :]) / h
        e = 0.5 * np.sum(diff * diff, axis=2)
        if leave_one_out:
            idx = np.arange(start, stop)
            e[idx - start, idx] = np.inf
        e -= e.min(axis=1, keepdims=True)
        w = np.exp(-e)
        out[start:stop] = (w @ Y) / w.sum(axis=1, keepdims=True)
    return out
