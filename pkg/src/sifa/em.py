"""Marginal likelihood, E-step, M-step variants and the EM driver.

The grand covariance Sigma* = G D G^T + Sigma_E is never materialized.  Every
quantity goes through the Woodbury factor in :mod:`sifa.numerics`, so one
iteration costs O(n * sum(p_k) * R) with R = r0 + sum(r_k).
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from sifa.core import (
    TOL,
    CovariateMap,
    FitOptions,
    FitReport,
    LatentMoments,
    MarginalMoments,
    MultiViewDataset,
    RankSet,
    SifaParams,
    block_slices,
    check_conditions,
    fix_signs,
    validate_dataset,
)
from sifa.numerics import (
    DegenerateRankError,
    WoodburyFactor,
    procrustes,
    thin_svd,
    top_svd,
    whitened_delta,
)
from sifa.regression import ColumnRegressor

LOG_2PI = float(np.log(2.0 * np.pi))
JIVE_LABEL = "JIVE configuration (f=0)"


# ---------------------------------------------------------------------------
# Likelihood and E-step
# ---------------------------------------------------------------------------


def marginal_moments(params: SifaParams, X: Optional[np.ndarray], n: Optional[int] = None) -> MarginalMoments:
    """Marginal mean mu* and the factors of Sigma*."""
    if n is None:
        if X is None:
            raise ValueError("n is required when there are no covariates")
        n = X.shape[0]
    if X is not None and X.shape[0] != n:
        raise ValueError(f"covariates have {X.shape[0]} rows, expected {n}")
    G = params.loadings()
    mu = params.mean_factors(X, n) @ G.T
    noise = np.concatenate([np.full(p, s) for p, s in zip(params.dims, params.noise_var)])
    return MarginalMoments(mu, G, params.factor_variances(), noise)


def _factor(params: SifaParams, orthogonal: bool) -> WoodburyFactor:
    nv = np.asarray(params.noise_var, dtype=float)
    if np.any(nv <= 0):
        raise ValueError("noise variances must be positive")
    delta = whitened_delta(params.V0, params.V, nv, orthogonal=orthogonal)
    return WoodburyFactor(delta, params.factor_variances())


def _view_columns(ranks: RankSet, k: int) -> np.ndarray:
    """Columns of the stacked latent vector that load on view k (joint, then individual)."""
    sl = block_slices(ranks)
    return np.r_[np.arange(sl[0].start, sl[0].stop), np.arange(sl[k + 1].start, sl[k + 1].stop)]


# Below this fraction of ||Y_k||^2 the expanded residual norm has lost too many
# digits to cancellation and is recomputed from the residual itself.
_CANCEL_FRAC = 1e-6


def _estep_loglik(params: SifaParams, Ys: Sequence[np.ndarray], X, orthogonal: bool = False):
    """E-step moments and the log-likelihood from one shared factorization.

    Per view only Y_k W_k with W_k = (V0k, V_k) touches the data, so the
    n x p_k residual is never formed: with R_k = Y_k - F_k W_k^T,
    R_k W_k = Y_k W_k - F_k W_k^T W_k and ||R_k||^2 follows from the same
    products.
    """
    n = Ys[0].shape[0]
    ranks = params.ranks
    nv = np.asarray(params.noise_var, dtype=float)
    wf = _factor(params, orthogonal)
    F = params.mean_factors(X, n)
    A = np.zeros((n, ranks.total))
    quad = 0.0
    for k, Y in enumerate(Ys):
        idx = _view_columns(ranks, k)
        W = np.hstack([params.V0[k], params.V[k]])
        Fk = F[:, idx]
        YW = Y @ W
        WtW = W.T @ W
        RW = YW - Fk @ WtW
        A[:, idx] += RW / nv[k]
        yy = float(np.vdot(Y, Y))
        rr = yy - 2.0 * float(np.sum(Fk * YW)) + float(np.sum((Fk.T @ Fk) * WtW))
        if rr < _CANCEL_FRAC * yy:
            R = Y - Fk @ W.T
            rr = float(np.vdot(R, R))
        quad += rr / nv[k]
    shift = wf.solve_inner(A.T).T  # (Y* - mu*) Sigma*^{-1} G D
    EU = F + shift
    C = wf.inner_inverse()
    EUtU = EU.T @ EU + n * C
    EUtU = 0.5 * (EUtU + EUtU.T)
    quad -= float(np.sum(A * shift))
    dims = params.dims
    logdet = float(np.dot(dims, np.log(nv))) + wf.logdet_B
    ll = -0.5 * n * sum(dims) * LOG_2PI - 0.5 * n * logdet - 0.5 * quad
    return LatentMoments(EU, C, EUtU), ll


def log_likelihood(params: SifaParams, data: MultiViewDataset, orthogonal: bool = False) -> float:
    """Marginal Gaussian log-likelihood of the observed rows of ``data``."""
    return _estep_loglik(params, data.arrays(), data.covariates, orthogonal)[1]


def e_step(params: SifaParams, data: MultiViewDataset, orthogonal: bool = False) -> LatentMoments:
    """Conditional moments of (U0, U*) given the data."""
    return _estep_loglik(params, data.arrays(), data.covariates, orthogonal)[0]


# ---------------------------------------------------------------------------
# M-step pieces
# ---------------------------------------------------------------------------


def mstep_regressions(moments: LatentMoments, X: Optional[np.ndarray], ranks: RankSet,
                      regressor: Optional[ColumnRegressor] = None):
    """Covariate maps and factor variances for every latent block.

    Returns ``(covariate_fns, Sigma0, Sigma)``; variances are floored but not
    sorted (see :func:`sort_factor_variances`).
    """
    EU, EUtU = moments.EU, moments.EUtU
    n = EU.shape[0]
    if X is not None and regressor is None:
        regressor = ColumnRegressor(X)
    fns, sigmas = [], []
    for b, sl in enumerate(block_slices(ranks)):
        r = sl.stop - sl.start
        Ub = EU[:, sl]
        second = np.diag(EUtU[sl, sl]).copy()
        if X is None or r == 0:
            fns.append(CovariateMap.zero(r))
            var = second / n
        else:
            cols, fitted = regressor.fit(Ub)
            fns.append(CovariateMap(r, tuple(cols), None))
            var = (second - 2.0 * np.sum(Ub * fitted, axis=0) + np.sum(fitted * fitted, axis=0)) / n
        sigmas.append(np.maximum(var, TOL.sigma_floor))
    return tuple(fns), sigmas[0], sigmas[1:]


def _safe_procrustes(M: np.ndarray, notes: Optional[list] = None) -> np.ndarray:
    try:
        return procrustes(M)
    except DegenerateRankError:
        p, r = M.shape
        scale = max(float(np.linalg.norm(M)), 1.0)
        if notes is not None:
            notes.append(f"rank-deficient Procrustes input ({p}x{r}); identity jitter added")
        return procrustes(M + 1e-8 * scale * np.eye(p, r))


def mstep_loadings_orthogonal(moments: LatentMoments, Ys: Sequence[np.ndarray], ranks: RankSet,
                              cross: Optional[list] = None, notes: Optional[list] = None):
    """Exact loading update under the orthogonal conditions.

    Per view, W_k = procrustes(Y_k^T [E(U0)/sqrt(K), E(U_k)]), V0k is the first
    r0 columns of W_k divided by sqrt(K) and V_k the rest.
    """
    K = len(Ys)
    sl = block_slices(ranks)
    rt = np.sqrt(K)
    V0, V = [], []
    for k, Y in enumerate(Ys):
        YtEU = cross[k] if cross is not None else Y.T @ moments.EU
        M = np.hstack([YtEU[:, sl[0]] / rt, YtEU[:, sl[k + 1]]])
        W = _safe_procrustes(M, notes) if M.shape[1] else np.zeros((Y.shape[1], 0))
        V0.append(W[:, :ranks.r0] / rt)
        V.append(W[:, ranks.r0:])
    return tuple(V0), tuple(V)


def renormalize_joint(V0_blocks: Sequence[np.ndarray], Sigma0: np.ndarray):
    """Rewrite (V0~, Sigma0~) with orthonormal V0 and the same V0 Sigma0 V0^T.

    Uses the thin SVD of V0~ Sigma0~^{1/2} = L diag(d) R^T, so the new pair is
    (L, d^2).  Also returns Q = V0~^T L, the change of latent basis: new
    joint factors are U0 Q, which leaves U0 V0~^T unchanged.
    """
    Vt = np.vstack(V0_blocks)
    r0 = Vt.shape[1]
    svd = thin_svd(Vt * np.sqrt(Sigma0), r0)
    L, d = svd.L, svd.d
    Q = Vt.T @ L
    dims = [v.shape[0] for v in V0_blocks]
    out, row = [], 0
    for p in dims:
        out.append(L[row:row + p])
        row += p
    return tuple(out), d * d, Q


def mstep_loadings_general(moments: LatentMoments, Ys: Sequence[np.ndarray], params: SifaParams,
                           Sigma0: np.ndarray, rounds: int = 1, cross: Optional[list] = None,
                           notes: Optional[list] = None):
    """Block coordinate update of (V_k, V0) under the general conditions.

    Each round solves the V_k Procrustes problems, the relaxed (unconstrained)
    V0 problem, and then renormalizes V0.  Returns
    ``(V0, V, Sigma0, Q, moments, cross)`` where ``Q`` is the accumulated joint
    change of basis and ``moments``/``cross`` are expressed in the new basis.
    """
    ranks = params.ranks
    r0 = ranks.r0
    sl = block_slices(ranks)
    K = len(Ys)
    V0 = list(params.V0)
    V = list(params.V)
    if cross is None:
        cross = [Y.T @ moments.EU for Y in Ys]
    Qtot = np.eye(r0)
    for _ in range(rounds):
        E = moments.EUtU
        for k in range(K):
            if ranks.r[k] == 0:
                continue
            M = cross[k][:, sl[k + 1]] - V0[k] @ E[sl[0], sl[k + 1]]
            V[k] = _safe_procrustes(M, notes)
        if r0 == 0:
            break
        E00 = E[sl[0], sl[0]]
        if np.linalg.cond(E00) >= 1e12:
            jit = 1e-8 * np.trace(E00) / r0
            E00 = E00 + jit * np.eye(r0)
            if notes is not None:
                notes.append(f"singular E(U0'U0); jitter {jit:.3g} added")
        E00_inv = np.linalg.inv(E00)
        V0_tilde = [(cross[k][:, sl[0]] - V[k] @ E[sl[k + 1], sl[0]]) @ E00_inv for k in range(K)]
        new_V0, Sigma0, Q = renormalize_joint(V0_tilde, Sigma0)
        V0 = list(new_V0)
        if notes is not None and np.any(Sigma0 < TOL.sigma_floor):
            notes.append(f"joint variances floored at {TOL.sigma_floor:g} after renormalization")
        Sigma0 = np.maximum(Sigma0, TOL.sigma_floor)
        moments, cross = _rebase_joint(moments, cross, Q, r0)
        Qtot = Qtot @ Q
    return tuple(V0), tuple(V), Sigma0, Qtot, moments, cross


def _rebase_joint(moments: LatentMoments, cross, Q, r0):
    """Express moments in the joint basis U0 -> U0 Q."""
    R = moments.EU.shape[1]
    T = np.eye(R)
    T[:r0, :r0] = Q
    EU = moments.EU @ T
    C = T.T @ moments.C @ T
    EUtU = T.T @ moments.EUtU @ T
    return LatentMoments(EU, 0.5 * (C + C.T), 0.5 * (EUtU + EUtU.T)), [c @ T for c in cross]


def mstep_noise(moments: LatentMoments, Ys: Sequence[np.ndarray], V0: Sequence[np.ndarray],
                V: Sequence[np.ndarray], cross: Optional[list] = None) -> np.ndarray:
    """sigma_k^2 = E||Y_k - U0 V0k^T - U_k V_k^T||_F^2 / (n p_k), floored."""
    r0 = V0[0].shape[1] if len(V0) else 0
    ranks = RankSet(r0, tuple(v.shape[1] for v in V))
    n = moments.EU.shape[0]
    out = np.empty(len(Ys))
    for k, Y in enumerate(Ys):
        idx = _view_columns(ranks, k)
        W = np.hstack([V0[k], V[k]])
        YtEU = (cross[k] if cross is not None else Y.T @ moments.EU)[:, idx]
        S = moments.EUtU[np.ix_(idx, idx)]
        val = float(np.vdot(Y, Y)) - 2.0 * float(np.sum(W * YtEU)) + float(np.sum((W.T @ W) * S))
        out[k] = max(val / (n * Y.shape[1]), TOL.noise_floor)
    return out


def sort_factor_variances(params: SifaParams) -> SifaParams:
    """Reorder each latent block so its variances are non-increasing.

    Loading columns and covariate-map outputs follow the same permutation,
    leaving the marginal model unchanged.
    """
    fns = list(params.covariate_fns)
    p0 = np.argsort(-params.Sigma0, kind="stable")
    V0 = tuple(v[:, p0] for v in params.V0)
    fns[0] = fns[0].permuted(p0)
    V, S = [], []
    for k, (vk, sk) in enumerate(zip(params.V, params.Sigma)):
        pk = np.argsort(-sk, kind="stable")
        V.append(vk[:, pk])
        S.append(sk[pk])
        fns[k + 1] = fns[k + 1].permuted(pk)
    return params.replace(V0=V0, V=tuple(V), Sigma0=params.Sigma0[p0], Sigma=tuple(S),
                          covariate_fns=tuple(fns))


def m_step(params: SifaParams, moments: LatentMoments, Ys, X, options: FitOptions,
           regressor: Optional[ColumnRegressor] = None, notes: Optional[list] = None) -> SifaParams:
    """One full M-step in the order regressions, loadings, noise, sort."""
    ranks = params.ranks
    fns, Sigma0, Sigma = mstep_regressions(moments, X, ranks, regressor)
    cross = [Y.T @ moments.EU for Y in Ys]
    if options.mode == "orthogonal":
        V0, V = mstep_loadings_orthogonal(moments, Ys, ranks, cross, notes)
    else:
        V0, V, Sigma0, Q, moments, cross = mstep_loadings_general(
            moments, Ys, params, Sigma0, options.inner_mstep_rounds, cross, notes)
        if ranks.r0:
            fns = (fns[0].remix(Q),) + tuple(fns[1:])
    noise = mstep_noise(moments, Ys, V0, V, cross)
    new = SifaParams(fns, tuple(V0), tuple(V), np.asarray(Sigma0, float), tuple(Sigma), noise)
    return sort_factor_variances(new)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _split_rows(M: np.ndarray, dims):
    out, row = [], 0
    for p in dims:
        out.append(M[row:row + p])
        row += p
    return out


def _joint_score_basis(Ys, ranks: RankSet) -> np.ndarray:
    """n x r0 orthonormal basis of the score directions shared by all views.

    Each view's top (r0 + r_k) left singular vectors span its signal score
    space.  Directions common to all K spaces have singular value close to
    sqrt(K) in the concatenation of those bases, so its top r0 left singular
    vectors estimate the joint scores.  A plain SVD of the stacked data would
    instead pick the strongest directions, joint or not.
    """
    n = Ys[0].shape[0]
    bases = []
    for Y, rk in zip(Ys, ranks.r):
        r = min(ranks.r0 + rk, min(Y.shape))
        bases.append(top_svd(Y, r).L)
    M = np.hstack(bases)
    if len(Ys) == 1 or M.shape[1] < ranks.r0:
        norms = [max(float(np.linalg.norm(Y)), np.finfo(float).tiny) for Y in Ys]
        M = np.hstack([Y / s for Y, s in zip(Ys, norms)])
    return thin_svd(M, min(ranks.r0, n)).L


def init_params(data: MultiViewDataset, ranks: RankSet, options: FitOptions = FitOptions()) -> SifaParams:
    """Starting values with zero covariate maps.

    ``svd``: joint scores from the directions shared by the per-view signal
    subspaces, V0 from the SVD of Y*^T times those scores, then per-view
    SVDs of the joint residuals.  ``random``: seeded Gaussian loadings
    orthonormalized by QR, with variances scaled to the data.
    """
    Ys = data.arrays()
    dims = data.dims
    n = data.n
    r0 = ranks.r0
    Ystar = np.hstack(Ys)
    fns = tuple(CovariateMap.zero(r) for r in ranks.all())
    if options.init == "random":
        rng = np.random.default_rng(options.seed)
        V0_full = np.linalg.qr(rng.standard_normal((sum(dims), r0)))[0] if r0 else np.zeros((sum(dims), 0))
        V = tuple(np.linalg.qr(rng.standard_normal((p, r)))[0] if r else np.zeros((p, 0))
                  for p, r in zip(dims, ranks.r))
        scale = float(np.sum(Ystar * Ystar)) / n / max(ranks.total, 1)
        Sigma0 = np.sort(rng.uniform(0.5, 1.5, r0))[::-1] * scale
        Sigma = tuple(np.sort(rng.uniform(0.5, 1.5, r))[::-1] * scale for r in ranks.r)
        noise = np.array([float(np.sum(Y * Y)) / (2.0 * n * Y.shape[1]) for Y in Ys])
        params = SifaParams(fns, tuple(_split_rows(V0_full, dims)), V, Sigma0, Sigma,
                            np.maximum(noise, TOL.noise_floor))
        return fix_signs(params)

    if r0:
        L0 = _joint_score_basis(Ys, ranks)
        V0_full = thin_svd(Ystar.T @ L0, r0).L
        U0 = Ystar @ V0_full
    else:
        V0_full = np.zeros((sum(dims), 0))
        U0 = np.zeros((n, 0))
    V0 = _split_rows(V0_full, dims)
    V, Sigma, noise = [], [], []
    for k, Y in enumerate(Ys):
        resid = Y - U0 @ V0[k].T
        rk = ranks.r[k]
        if rk:
            s = top_svd(resid, rk)
            V.append(s.R)
            Sigma.append(np.maximum(s.d ** 2 / n, TOL.sigma_floor))
            resid = resid - s.reconstruct()
        else:
            V.append(np.zeros((Y.shape[1], 0)))
            Sigma.append(np.zeros(0))
        noise.append(max(float(np.sum(resid * resid)) / (n * Y.shape[1]), TOL.noise_floor))
    Sigma0 = np.maximum(np.sum(U0 * U0, axis=0) / n, TOL.sigma_floor)
    params = SifaParams(fns, tuple(V0), tuple(V), Sigma0, tuple(Sigma), np.array(noise))
    return fix_signs(sort_factor_variances(params))


# ---------------------------------------------------------------------------
# Structure decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewStructure:
    """The five additive parts of one view; they sum to the view exactly."""

    joint_deterministic: np.ndarray
    individual_deterministic: np.ndarray
    joint_random: np.ndarray
    individual_random: np.ndarray
    residual: np.ndarray

    PARTS = ("joint_deterministic", "individual_deterministic", "joint_random",
             "individual_random", "residual")

    def parts(self) -> dict:
        return {name: getattr(self, name) for name in self.PARTS}

    def total(self) -> np.ndarray:
        return sum(self.parts().values())


def decompose_structure(params: SifaParams, moments: LatentMoments, data: MultiViewDataset) -> list:
    """Split each view into f0 V0k^T, f_k V_k^T, F0 V0k^T, F_k V_k^T and residual.

    The random parts use F = E(U | Y*) - f(X).
    """
    n = data.n
    F = params.mean_factors(data.covariates, n)
    Fhat = moments.EU - F
    sl = block_slices(params.ranks)
    out = []
    for k, Y in enumerate(data.arrays()):
        jd = F[:, sl[0]] @ params.V0[k].T
        idt = F[:, sl[k + 1]] @ params.V[k].T
        jr = Fhat[:, sl[0]] @ params.V0[k].T
        ir = Fhat[:, sl[k + 1]] @ params.V[k].T
        out.append(ViewStructure(jd, idt, jr, ir, Y - jd - idt - jr - ir))
    return out


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def fit(data: MultiViewDataset, ranks: RankSet, options: FitOptions = FitOptions(),
        init: Optional[SifaParams] = None, structure: bool = True) -> FitReport:
    """Maximum-likelihood SIFA fit by EM.

    Without covariates every covariate map is the zero function and the
    report is labelled as the JIVE configuration.  Non-convergence is
    reported through ``converged=False``; it never raises.
    """
    bad = validate_dataset(data)
    if bad:
        raise ValueError("invalid dataset: " + "; ".join(str(v) for v in bad))
    ranks.check(data.dims, data.n)
    start = time.perf_counter()
    Ys = data.arrays()
    X = data.covariates
    notes: list = []
    regressor = None
    if X is not None:
        regressor = ColumnRegressor(X, options.regression_family, bandwidth=options.kernel_bandwidth,
                                    folds=options.lasso_folds, seed=options.seed)
        if getattr(regressor, "jitter", 0.0):
            notes.append(f"ill-conditioned X'X; ridge jitter {regressor.jitter:.3g} added")
    params = init if init is not None else init_params(data, ranks, options)
    moments, ll = _estep_loglik(params, Ys, X)
    orth = options.mode == "orthogonal"
    if orth and not check_conditions(params, "orthogonal").orthogonal_ok():
        # Start from a point of the constrained parameter space, so that the
        # trace only contains iterates the orthogonal M-step can improve on.
        params = m_step(params, moments, Ys, X, options, regressor, notes)
        moments, ll = _estep_loglik(params, Ys, X, orthogonal=True)
        notes.append("initial values projected onto the orthogonal conditions")
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, options.max_iters + 1):
        params = m_step(params, moments, Ys, X, options, regressor, notes)
        moments, ll = _estep_loglik(params, Ys, X, orthogonal=orth)
        prev = trace[-1]
        trace.append(ll)
        if ll < prev - 1e-4 * abs(prev):
            msg = f"log-likelihood dropped at iteration {it}: {prev:.6g} -> {ll:.6g}"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        if abs(ll - prev) <= options.tol * max(abs(prev), 1e-300):
            converged = True
            break
    params = fix_signs(params)
    moments, ll = _estep_loglik(params, Ys, X, orthogonal=orth)
    trace[-1] = ll
    parts = decompose_structure(params, moments, data) if structure else None
    label = JIVE_LABEL if X is None else ("SIFA-B" if orth else "SIFA-A")
    return FitReport(params, trace, it, converged, time.perf_counter() - start, moments,
                     parts, options, label, notes)
