"""Covariate-function backends for the M-step least-squares problems.

Each latent column is regressed on the covariates separately.  Three
families are available: ordinary least squares, cross-validated lasso
(coordinate descent), and Nadaraya-Watson kernel regression.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from sifa._backend import kernels

COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegressionFn:
    """A fitted scalar function of the covariates.

    Linear and lasso fits keep ``beta``; lasso also keeps the active set and
    the selected penalty.  Kernel fits keep the training covariates,
    training responses and per-dimension bandwidth.  The ``bank`` family is
    a known closed-form univariate function used for simulation ground
    truth: ``beta = (amplitude, shift, intercept)`` and the value is
    ``amplitude * FUNCTION_BANK[fn_name](x + shift) - intercept``.
    """

    family: str
    q: int
    beta: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None
    lam: Optional[float] = None
    X_train: Optional[np.ndarray] = None
    y_train: Optional[np.ndarray] = None
    bandwidth: Optional[np.ndarray] = None
    jitter: float = 0.0
    fn_name: Optional[str] = None


def _standardized(g, mean, var):
    sd = np.sqrt(var)
    return lambda x: (g(x) - mean) / sd


# Mean 0 and variance 1 under Uniform(-1, 1).
FUNCTION_BANK = {
    "sine": _standardized(lambda x: np.sin(np.pi * x), 0.0, 0.5),
    "cosine": _standardized(lambda x: np.cos(np.pi * x), 0.0, 0.5),
    "quadratic": _standardized(lambda x: x ** 2, 1.0 / 3.0, 4.0 / 45.0),
    "cubic": _standardized(lambda x: x ** 3, 0.0, 1.0 / 7.0),
}


def predict(f: RegressionFn, Xnew: np.ndarray) -> np.ndarray:
    Xnew = np.asarray(Xnew, dtype=float)
    if Xnew.ndim == 1:
        Xnew = Xnew[None, :] if f.q > 1 else Xnew[:, None]
    if Xnew.shape[1] != f.q:
        raise ValueError(f"expected {f.q} covariate columns, got {Xnew.shape[1]}")
    if f.family in ("linear", "lasso"):
        return Xnew @ f.beta
    if f.family == "kernel":
        return kernels.nw_smooth(f.X_train, f.y_train[:, None], f.bandwidth, Xnew)[:, 0]
    if f.family == "bank":
        amp, shift, intercept = f.beta
        return amp * FUNCTION_BANK[f.fn_name](Xnew[:, 0] + shift) - intercept
    raise ValueError(f"unknown family {f.family!r}")


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


def _gram(X: np.ndarray):
    """X^T X with ridge jitter when ill conditioned; returns (gram, jitter)."""
    n, q = X.shape
    if n <= q:
        raise ValueError(f"OLS needs n > q (n={n}, q={q}); use the lasso family")
    XtX = X.T @ X
    jitter = 0.0
    if np.linalg.cond(XtX) >= COND_LIMIT:
        jitter = 1e-8 * np.trace(XtX) / q
        XtX = XtX + jitter * np.eye(q)
    return XtX, jitter


def fit_linear(X: np.ndarray, y: np.ndarray) -> RegressionFn:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    XtX, jitter = _gram(X)
    beta = sla.solve(XtX, X.T @ y, assume_a="pos")
    return RegressionFn("linear", X.shape[1], beta=beta, jitter=jitter)


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    return float(np.max(np.abs(X.T @ y)) / X.shape[0]) if X.shape[1] else 0.0


def default_lambda_grid(X, y, size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    lm = lambda_max(X, y)
    if lm == 0.0:
        return np.array([1.0])
    return np.geomspace(lm, ratio * lm, size)


def lasso_path(X, y, lambdas, tol: float = 1e-7, max_iter: int = 10000) -> np.ndarray:
    """Warm-started solutions along a decreasing penalty grid, len(lambdas) x q."""
    X = np.asfortranarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, q = X.shape
    col_sq = np.einsum("ij,ij->j", X, X) / n
    beta = np.zeros(q)
    out = np.empty((len(lambdas), q))
    for i, lam in enumerate(lambdas):
        kernels.lasso_cd(X, y, float(lam), beta, col_sq, tol, max_iter)
        out[i] = beta
    return out


def fit_lasso(X, y, lambda_grid=None, folds: int = 5, seed: int = 0,
              tol: float = 1e-7) -> RegressionFn:
    """Lasso at the penalty minimizing ``folds``-fold CV squared error.

    Objective is (1/2n)||y - X b||^2 + lam ||b||_1.  CV ties go to the larger
    penalty.  All-zero covariate columns are dropped (coefficient 0).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < 3 * folds:
        raise ValueError(f"lasso CV needs n >= 3*folds (n={n}, folds={folds})")
    keep = np.flatnonzero(np.any(X != 0, axis=0))
    if keep.size < q:
        warnings.warn(f"dropping {q - keep.size} all-zero covariate column(s)", stacklevel=2)
    Xk = X[:, keep]
    grid = default_lambda_grid(Xk, y) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) >= 0):
        raise ValueError("lambda_grid must be non-empty, positive and strictly decreasing")

    if grid.size == 1:
        best = 0
    else:
        perm = np.random.default_rng(seed).permutation(n)
        err = np.zeros(grid.size)
        for test in np.array_split(perm, folds):
            train = np.setdiff1d(perm, test, assume_unique=True)
            path = lasso_path(Xk[train], y[train], grid, tol)
            resid = y[test][:, None] - Xk[test] @ path.T
            err += np.sum(resid ** 2, axis=0)
        best = int(np.argmin(err))  # first minimum = largest penalty
    path = lasso_path(Xk, y, grid[:best + 1], tol)
    beta = np.zeros(q)
    beta[keep] = path[-1]
    return RegressionFn("lasso", q, beta=beta, active=np.flatnonzero(beta != 0),
                        lam=float(grid[best]))


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def silverman_bandwidth(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    sd = X.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    return 1.06 * sd * n ** (-0.2)


def _resolve_bandwidth(X, y, policy):
    q = X.shape[1]
    if isinstance(policy, (int, float, np.floating)):
        h = np.full(q, float(policy))
    elif isinstance(policy, tuple) and policy[0] == "fixed":
        h = np.broadcast_to(np.asarray(policy[1], dtype=float), (q,)).copy()
    elif policy == "silverman":
        h = silverman_bandwidth(X)
    elif policy == "loocv":
        base = silverman_bandwidth(X)
        best, best_err = None, np.inf
        for scale in np.geomspace(0.05, 5.0, 25):
            fit = kernels.nw_smooth(X, y[:, None], base * scale, X, True)[:, 0]
            err = float(np.mean((y - fit) ** 2))
            if err < best_err:
                best, best_err = base * scale, err
        h = best
    else:
        raise ValueError(f"unknown bandwidth policy {policy!r}")
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise ValueError("bandwidth must be positive")
    return h


def fit_kernel(X, y, bandwidth_policy="silverman") -> RegressionFn:
    """Nadaraya-Watson regression with a product Gaussian kernel.

    ``bandwidth_policy`` is ``"silverman"``, ``"loocv"`` (log grid around the
    Silverman bandwidth), a positive number, or ``("fixed", h)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if q > 5:
        raise ValueError(f"kernel regression supports at most 5 covariates, got {q}")
    if n < 10:
        raise ValueError("kernel regression needs n >= 10")
    h = _resolve_bandwidth(X, y, bandwidth_policy)
    return RegressionFn("kernel", q, X_train=X, y_train=y.copy(), bandwidth=h)


def smoother_matrix(X: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-stochastic n x n matrix S with S @ y = kernel fit at training points."""
    diff = (X[:, None, :] - X[None, :, :]) / h
    e = 0.5 * np.sum(diff * diff, axis=2)
    e -= e.min(axis=1, keepdims=True)
    W = np.exp(-e)
    return W / W.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Batch fitting used inside EM
# ---------------------------------------------------------------------------


class ColumnRegressor:
    """Fits one regression per column of a response matrix on fixed covariates.

    Work that depends only on the covariates (Gram factorization, kernel
    smoother) is done once at construction.
    """

    def __init__(self, X: np.ndarray, family: str = "linear", bandwidth="silverman",
                 folds: int = 5, seed: int = 0):
        self.X = np.asarray(X, dtype=float)
        self.family = family
        self.folds = folds
        self.seed = seed
        self.bandwidth = bandwidth
        n, q = self.X.shape
        if family == "linear":
            XtX, self.jitter = _gram(self.X)
            self._chol = sla.cho_factor(XtX)
        elif family == "kernel":
            if q > 5:
                raise ValueError(f"kernel regression supports at most 5 covariates, got {q}")
            if n < 10:
                raise ValueError("kernel regression needs n >= 10")
            self._h = None if bandwidth == "loocv" else _resolve_bandwidth(self.X, None, bandwidth)
            self._S = None if self._h is None else smoother_matrix(self.X, self._h)
        elif family != "lasso":
            raise ValueError(f"unknown family {family!r}")

    def fit(self, Y: np.ndarray):
        """Returns ``(fns, fitted)`` for the columns of ``Y`` (n x r)."""
        r = Y.shape[1]
        if r == 0:
            return [], np.zeros_like(Y)
        q = self.X.shape[1]
        if self.family == "linear":
            B = sla.cho_solve(self._chol, self.X.T @ Y)
            fns = [RegressionFn("linear", q, beta=B[:, j].copy(), jitter=self.jitter) for j in range(r)]
            return fns, self.X @ B
        if self.family == "kernel" and self._S is not None:
            fns = [RegressionFn("kernel", q, X_train=self.X, y_train=Y[:, j].copy(), bandwidth=self._h)
                   for j in range(r)]
            return fns, self._S @ Y
        if self.family == "kernel":
            fns = [fit_kernel(self.X, Y[:, j], "loocv") for j in range(r)]
        else:
            fns = [fit_lasso(self.X, Y[:, j], folds=self.folds, seed=self.seed) for j in range(r)]
        return fns, np.column_stack([predict(f, self.X) for f in fns])
