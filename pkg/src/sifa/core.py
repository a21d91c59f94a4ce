"""Shared domain types, dataset validation and identifiability checks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances used across the package and its property tests."""

    orthonormal: float = 1e-8
    exact: float = 1e-10
    centering: float = 1e-10
    sign_zero: float = 1e-12
    sigma_floor: float = 1e-8
    noise_floor: float = 1e-12


TOL = Tolerances()


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewMatrix:
    values: np.ndarray
    view_id: int

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MultiViewDataset:
    """K sample-aligned views plus an optional covariate matrix.

    ``centered`` records whether columns were mean-centered at construction;
    validation only enforces zero column means when it is set.
    """

    views: tuple
    covariates: Optional[np.ndarray] = None
    centered: bool = False

    @classmethod
    def from_arrays(cls, views: Sequence[np.ndarray], covariates=None,
                    center: bool = True) -> "MultiViewDataset":
        mats = [np.array(v, dtype=float, copy=True) for v in views]
        X = None if covariates is None else np.array(covariates, dtype=float, copy=True)
        if X is not None and X.ndim == 1:
            X = X[:, None]
        if center:
            mats = [m - m.mean(axis=0) for m in mats]
            if X is not None:
                X = X - X.mean(axis=0)
        vs = tuple(ViewMatrix(m, k + 1) for k, m in enumerate(mats))
        return cls(vs, X, center)

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def n(self) -> int:
        return self.views[0].n

    @property
    def dims(self) -> list[int]:
        return [v.p for v in self.views]

    @property
    def q(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [v.values for v in self.views]

    def stacked(self) -> np.ndarray:
        """The combined n x sum(p_k) matrix."""
        return np.hstack(self.arrays())

    def rows(self, idx) -> "MultiViewDataset":
        """Row subset; the result is not flagged as centered."""
        idx = np.asarray(idx)
        vs = tuple(ViewMatrix(v.values[idx], v.view_id) for v in self.views)
        X = None if self.covariates is None else self.covariates[idx]
        return MultiViewDataset(vs, X, False)

    def without_covariates(self) -> "MultiViewDataset":
        return MultiViewDataset(self.views, None, self.centered)

    def with_views(self, views: Sequence[np.ndarray]) -> "MultiViewDataset":
        vs = tuple(ViewMatrix(np.asarray(m, dtype=float), k + 1)
                   for k, m in enumerate(views))
        return MultiViewDataset(vs, self.covariates, self.centered)


@dataclass(frozen=True)
class Violation:
    location: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        s = f"{self.location}: {self.rule}"
        return f"{s} ({self.detail})" if self.detail else s


def validate_dataset(data: MultiViewDataset) -> list[Violation]:
    """Return every broken dataset invariant; an empty list means valid."""
    out: list[Violation] = []
    if len(data.views) == 0:
        return [Violation("dataset", "no views")]
    n0 = data.views[0].values.shape[0]
    for v in data.views:
        loc = f"view {v.view_id}"
        a = v.values
        if a.ndim != 2:
            out.append(Violation(loc, "not a matrix", f"ndim={a.ndim}"))
            continue
        if a.shape[0] != n0:
            out.append(Violation(loc, "row count mismatch", f"{a.shape[0]} != {n0}"))
        if a.shape[0] < 2:
            out.append(Violation(loc, "too few rows", f"n={a.shape[0]}"))
        if a.shape[1] < 1:
            out.append(Violation(loc, "no columns"))
        bad = ~np.isfinite(a)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            out.append(Violation(loc, "non-finite", f"first at row {i}, column {j}"))
        elif data.centered and a.size:
            dev = np.abs(a.mean(axis=0))
            j = int(np.argmax(dev))
            if dev[j] > TOL.centering * a.shape[0]:
                out.append(Violation(f"{loc} column {j}", "not centered", f"mean={dev[j]:.3g}"))
    X = data.covariates
    if X is not None:
        if X.ndim != 2 or X.shape[0] != n0:
            out.append(Violation("covariates", "row count mismatch", f"{X.shape} vs n={n0}"))
        elif not np.isfinite(X).all():
            i, j = np.argwhere(~np.isfinite(X))[0]
            out.append(Violation("covariates", "non-finite", f"first at row {i}, column {j}"))
        elif data.centered and X.size:
            dev = np.abs(X.mean(axis=0))
            j = int(np.argmax(dev))
            if dev[j] > TOL.centering * X.shape[0]:
                out.append(Violation(f"covariates column {j}", "not centered", f"mean={dev[j]:.3g}"))
    return out


@dataclass(frozen=True)
class RankSet:
    r0: int
    r: tuple

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(x) for x in self.r))
        if self.r0 < 0 or any(x < 0 for x in self.r):
            raise ValueError(f"ranks must be non-negative: {self}")

    @classmethod
    def parse(cls, text: str) -> "RankSet":
        parts = [int(t) for t in text.replace(";", ",").split(",") if t.strip()]
        if len(parts) < 2:
            raise ValueError(f"need r0 and at least one individual rank: {text!r}")
        return cls(parts[0], tuple(parts[1:]))

    @property
    def K(self) -> int:
        return len(self.r)

    @property
    def total(self) -> int:
        return self.r0 + sum(self.r)

    def all(self) -> list[int]:
        return [self.r0, *self.r]

    def violations(self, dims: Sequence[int], n: int) -> list[str]:
        out = []
        if len(dims) != self.K:
            return [f"{self.K} individual ranks for {len(dims)} views"]
        for k, (rk, pk) in enumerate(zip(self.r, dims), start=1):
            if self.r0 + rk >= pk:
                out.append(f"view {k}: r0 + r{k} = {self.r0 + rk} must be < p{k} = {pk}")
        if self.total > n:
            out.append(f"total rank {self.total} exceeds n = {n}")
        return out

    def check(self, dims: Sequence[int], n: int) -> None:
        bad = self.violations(dims, n)
        if bad:
            raise ValueError("invalid ranks: " + "; ".join(bad))

    def __str__(self) -> str:
        return ",".join(str(x) for x in self.all())


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateMap:
    """Vector-valued covariate function f_k(.) for one latent block.

    Evaluates ``[f_1(X), ..., f_r(X)] @ mix``.  ``mix`` starts as the identity
    and absorbs column sign flips and the joint-basis rotation of the general
    M-step, so that fitted functions never need refitting after a change of
    latent basis.  An empty ``fns`` list is the zero function.
    """

    r: int
    fns: tuple = ()
    mix: Optional[np.ndarray] = None

    @classmethod
    def zero(cls, r: int) -> "CovariateMap":
        return cls(r, (), None)

    @property
    def is_zero(self) -> bool:
        return len(self.fns) == 0

    def mixing(self) -> np.ndarray:
        return np.eye(self.r) if self.mix is None else self.mix

    def __call__(self, X: Optional[np.ndarray], n: Optional[int] = None) -> np.ndarray:
        if self.is_zero:
            if n is None:
                n = 0 if X is None else X.shape[0]
            return np.zeros((n, self.r))
        from sifa.regression import predict

        if X is None:
            raise ValueError("covariate function requires covariates")
        cols = np.column_stack([predict(f, X) for f in self.fns]) if self.fns else np.zeros((X.shape[0], 0))
        return cols if self.mix is None else cols @ self.mix

    def remix(self, M: np.ndarray) -> "CovariateMap":
        """Return the map x -> f(x) @ M."""
        if self.is_zero:
            return self
        return CovariateMap(self.r, self.fns, self.mixing() @ M)

    def permuted(self, perm) -> "CovariateMap":
        if self.is_zero:
            return self
        return CovariateMap(self.r, self.fns, self.mixing()[:, perm])


@dataclass(frozen=True)
class SifaParams:
    """Full SIFA parameter set.

    ``V0`` is held as the K per-view blocks V_{0,k} (p_k x r0); ``V`` holds the
    individual loadings V_k (p_k x r_k).  ``covariate_fns[0]`` is the joint
    map f_0, ``covariate_fns[k]`` the individual map f_k.
    """

    covariate_fns: tuple
    V0: tuple
    V: tuple
    Sigma0: np.ndarray
    Sigma: tuple
    noise_var: np.ndarray

    @property
    def K(self) -> int:
        return len(self.V)

    @property
    def ranks(self) -> RankSet:
        return RankSet(len(self.Sigma0), tuple(len(s) for s in self.Sigma))

    @property
    def dims(self) -> list[int]:
        return [v.shape[0] for v in self.V]

    def V0_full(self) -> np.ndarray:
        return np.vstack(self.V0) if self.V0 else np.zeros((0, len(self.Sigma0)))

    def loadings(self) -> np.ndarray:
        """Combined (V0, blkdiag(V_1..V_K)) matrix, sum(p) x (r0 + sum(r))."""
        dims = self.dims
        r0 = len(self.Sigma0)
        rk = [v.shape[1] for v in self.V]
        G = np.zeros((sum(dims), r0 + sum(rk)))
        row, col = 0, r0
        for k in range(self.K):
            G[row:row + dims[k], :r0] = self.V0[k]
            G[row:row + dims[k], col:col + rk[k]] = self.V[k]
            row += dims[k]
            col += rk[k]
        return G

    def factor_variances(self) -> np.ndarray:
        return np.concatenate([self.Sigma0, *self.Sigma]) if self.K else np.asarray(self.Sigma0)

    def mean_factors(self, X: Optional[np.ndarray], n: int) -> np.ndarray:
        """[f_0(X), f_1(X), ..., f_K(X)], n x (r0 + sum(r))."""
        return np.hstack([f(X, n) for f in self.covariate_fns])

    def replace(self, **kw) -> "SifaParams":
        return replace(self, **kw)


def block_slices(ranks: RankSet) -> list[slice]:
    """Column slices of the latent blocks 0..K inside a combined factor matrix."""
    out, start = [], 0
    for r in ranks.all():
        out.append(slice(start, start + r))
        start += r
    return out


def view_slices(dims: Sequence[int]) -> list[slice]:
    out, start = [], 0
    for p in dims:
        out.append(slice(start, start + p))
        start += p
    return out


# ---------------------------------------------------------------------------
# Moments, options, reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentMoments:
    """Conditional moments of the latent factors given the data.

    EU : n x R conditional means, R = r0 + sum(r_k)
    C : R x R conditional covariance, shared by all rows
    EUtU : E[(U0, U*)^T (U0, U*) | Y*] = EU^T EU + n C
    """

    EU: np.ndarray
    C: np.ndarray
    EUtU: np.ndarray


@dataclass(frozen=True)
class MarginalMoments:
    mu_star: np.ndarray
    G: np.ndarray
    factor_var: np.ndarray
    noise_diag: np.ndarray

    def dense_cov(self) -> np.ndarray:
        """Materialize Sigma* (small instances and test oracles only)."""
        return (self.G * self.factor_var) @ self.G.T + np.diag(self.noise_diag)


MODES = ("general", "orthogonal")
FAMILIES = ("linear", "lasso", "kernel")


@dataclass(frozen=True)
class FitOptions:
    mode: str = "orthogonal"
    regression_family: str = "linear"
    max_iters: int = 500
    tol: float = 1e-6
    seed: int = 0
    inner_mstep_rounds: int = 1
    init: str = "svd"
    kernel_bandwidth: object = "silverman"
    lasso_folds: int = 5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.regression_family not in FAMILIES:
            raise ValueError(f"regression_family must be one of {FAMILIES}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.inner_mstep_rounds < 1:
            raise ValueError("inner_mstep_rounds must be >= 1")
        if self.init not in ("svd", "random"):
            raise ValueError("init must be 'svd' or 'random'")

    def replace(self, **kw) -> "FitOptions":
        return replace(self, **kw)


@dataclass
class FitReport:
    params: SifaParams
    loglik_trace: list
    iterations: int
    converged: bool
    elapsed: float
    moments: Optional[LatentMoments] = None
    structure: Optional[list] = None
    options: Optional[FitOptions] = None
    label: str = "SIFA"
    notes: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


# ---------------------------------------------------------------------------
# Identifiability conditions
# ---------------------------------------------------------------------------


def _min_sv(A: np.ndarray) -> float:
    if A.shape[1] == 0:
        return float("inf")
    return float(np.linalg.svd(A, compute_uv=False)[-1]) if min(A.shape) else 0.0


def _orth_dev(A: np.ndarray, scale: float = 1.0) -> float:
    if A.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(A.T @ A - scale * np.eye(A.shape[1]))))


@dataclass
class ConditionReport:
    mode: str
    V0_orthonormality: float
    V_orthonormality: list
    sigma_positive: bool
    sigma_sorted: bool
    a1_min_sv: Optional[list] = None
    a2_min_sv: Optional[list] = None
    b1_deviation: Optional[list] = None
    b2_deviation: Optional[list] = None

    def basic_ok(self, tol: float = TOL.orthonormal) -> bool:
        return (self.V0_orthonormality <= tol and all(d <= tol for d in self.V_orthonormality)
                and self.sigma_positive and self.sigma_sorted)

    def orthogonal_ok(self, tol: float = TOL.orthonormal) -> bool:
        return (self.b1_deviation is not None and all(d <= tol for d in self.b1_deviation)
                and all(d <= tol for d in self.b2_deviation))

    def general_ok(self, tol: float = 1e-10) -> bool:
        return (self.a1_min_sv is not None and all(s > tol for s in self.a1_min_sv)
                and all(s > tol for s in self.a2_min_sv))


def check_conditions(params: SifaParams, mode: str = "general") -> ConditionReport:
    """Measure how well ``params`` meets the basic and mode-specific conditions.

    General mode reports the smallest singular value of each V_{0,k} (A1) and of
    each [V_{0,k}, V_k] (A2).  Orthogonal mode reports max-abs deviations of
    V_{0,k}^T V_{0,k} from I/K (B1) and of V_{0,k}^T V_k from 0 (B2).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sig = [np.asarray(params.Sigma0), *[np.asarray(s) for s in params.Sigma]]
    rep = ConditionReport(
        mode=mode,
        V0_orthonormality=_orth_dev(params.V0_full()),
        V_orthonormality=[_orth_dev(v) for v in params.V],
        sigma_positive=all(bool(np.all(s > 0)) for s in sig),
        sigma_sorted=all(bool(np.all(np.diff(s) <= 0)) for s in sig),
    )
    K = params.K
    if mode == "general":
        rep.a1_min_sv = [_min_sv(v0k) for v0k in params.V0]
        rep.a2_min_sv = [_min_sv(np.hstack([v0k, vk])) for v0k, vk in zip(params.V0, params.V)]
    else:
        rep.b1_deviation = [_orth_dev(v0k, 1.0 / K) for v0k in params.V0]
        rep.b2_deviation = [float(np.max(np.abs(v0k.T @ vk))) if v0k.size and vk.size else 0.0
                            for v0k, vk in zip(params.V0, params.V)]
    return rep


def _leading_sign(col: np.ndarray) -> float:
    nz = np.flatnonzero(np.abs(col) > TOL.sign_zero)
    if nz.size == 0:
        return 1.0
    return -1.0 if col[nz[0]] < 0 else 1.0


def fix_signs(params: SifaParams, return_flips: bool = False):
    """Make the first non-negligible entry of every loading column positive.

    A flipped loading column is paired with a flipped factor, so the covariate
    map of that block has its output column negated (through ``mix``).  The
    marginal model, hence the likelihood, is unchanged.
    """
    V0 = params.V0_full()
    s0 = np.array([_leading_sign(V0[:, j]) for j in range(V0.shape[1])])
    flips = [s0]
    new_V0 = tuple(v * s0 for v in params.V0)
    new_V, fns = [], [params.covariate_fns[0].remix(np.diag(s0)) if (s0 < 0).any() else params.covariate_fns[0]]
    for k, vk in enumerate(params.V):
        sk = np.array([_leading_sign(vk[:, j]) for j in range(vk.shape[1])])
        flips.append(sk)
        new_V.append(vk * sk)
        f = params.covariate_fns[k + 1]
        fns.append(f.remix(np.diag(sk)) if (sk < 0).any() else f)
    out = params.replace(V0=new_V0, V=tuple(new_V), covariate_fns=tuple(fns))
    return (out, flips) if return_flips else out
