"""Subspace metrics, recovery error, variance accounting and baseline methods."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from sifa.core import FitOptions, FitReport, MultiViewDataset, RankSet, SifaParams
from sifa.numerics import thin_svd

ORTHONORMAL_CHECK = 1e-6


def _check_orthonormal(V: np.ndarray, name: str) -> None:
    if V.shape[1] and np.max(np.abs(V.T @ V - np.eye(V.shape[1]))) > ORTHONORMAL_CHECK:
        raise ValueError(f"{name} does not have orthonormal columns")


def principal_angles(Q1: np.ndarray, Q2: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between spans of orthonormal Q1 and Q2.

    Angles whose cosine exceeds 1/sqrt(2) are taken from the sines, which
    keeps small angles accurate where arccos of a value near 1 is not.
    """
    if Q1.shape[1] > Q2.shape[1]:
        Q1, Q2 = Q2, Q1
    M = Q2.T @ Q1
    cos = np.clip(np.linalg.svd(M, compute_uv=False), 0.0, 1.0)
    # Sines are the singular values of the part of Q1 outside span(Q2).
    sin = np.clip(np.sort(np.linalg.svd(Q1 - Q2 @ M, compute_uv=False)), 0.0, 1.0)
    return np.where(cos > np.sqrt(0.5), np.arcsin(sin), np.arccos(cos))


def grassmannian(V: np.ndarray, Vhat: np.ndarray) -> float:
    """Grassmann distance sqrt(sum acos(delta_i)^2) between two orthonormal bases.

    ``delta_i`` are the singular values of V^T Vhat, clamped to [0, 1]; small
    angles are evaluated through their sines (see :func:`principal_angles`).
    """
    V = np.asarray(V, dtype=float)
    Vhat = np.asarray(Vhat, dtype=float)
    if V.shape != Vhat.shape:
        raise ValueError(f"shape mismatch: {V.shape} vs {Vhat.shape}")
    if V.shape[1] == 0:
        return 0.0
    _check_orthonormal(V, "V")
    _check_orthonormal(Vhat, "Vhat")
    return float(np.sqrt(np.sum(principal_angles(V, Vhat) ** 2)))


def _orth_basis(A: np.ndarray, name: str) -> np.ndarray:
    U, d, _ = np.linalg.svd(A, full_matrices=False)
    if d.size == 0 or d[-1] <= 1e-12 * max(d[0], 1e-300):
        raise ValueError(f"{name} is rank deficient")
    return U


def max_principal_angle(V: np.ndarray, Vhat: np.ndarray) -> float:
    """Largest principal angle between span(V) and span(Vhat), in degrees.

    Inputs need not be orthonormal; both are orthonormalized first.  With
    different column counts the angle is measured from the smaller subspace.
    """
    V = np.asarray(V, dtype=float)
    Vhat = np.asarray(Vhat, dtype=float)
    if V.shape[0] != Vhat.shape[0]:
        raise ValueError(f"row mismatch: {V.shape} vs {Vhat.shape}")
    Q1 = _orth_basis(V, "V")
    Q2 = _orth_basis(Vhat, "Vhat")
    return float(min(np.degrees(principal_angles(Q1, Q2)[-1]), 90.0))


def recovery_error(truth_signal: np.ndarray, EU: np.ndarray, V0: np.ndarray,
                   V: Sequence[np.ndarray]) -> float:
    """||truth - EU (V0, blkdiag(V))^T||_F.

    ``V0`` is the stacked joint loading matrix (sum(p) x r0).
    """
    dims = [v.shape[0] for v in V]
    if V0.shape[0] != sum(dims):
        raise ValueError("V0 rows do not match the individual loadings")
    G = np.zeros((sum(dims), V0.shape[1] + sum(v.shape[1] for v in V)))
    G[:, :V0.shape[1]] = V0
    row, col = 0, V0.shape[1]
    for v in V:
        G[row:row + v.shape[0], col:col + v.shape[1]] = v
        row += v.shape[0]
        col += v.shape[1]
    if EU.shape[1] != G.shape[1] or truth_signal.shape != (EU.shape[0], G.shape[0]):
        raise ValueError("shape mismatch between signal, scores and loadings")
    return float(np.linalg.norm(truth_signal - EU @ G.T))


# ---------------------------------------------------------------------------
# Evaluation against ground truth
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    d_G: dict
    max_principal_angle: float
    recovery_error: float
    variance: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"d_G": dict(self.d_G), "max_principal_angle": self.max_principal_angle,
                "recovery_error": self.recovery_error, "variance": self.variance}


def evaluate(params: SifaParams, EU: np.ndarray, truth_params: SifaParams,
             truth_signal: np.ndarray) -> MetricsReport:
    """d_G per loading block, combined-subspace angle and recovery error.

    d_G for the joint block compares the stacked V0 matrices.  Blocks with
    rank zero are skipped.
    """
    d = {}
    if len(truth_params.Sigma0):
        d["V0"] = grassmannian(truth_params.V0_full(), params.V0_full())
    for k, (vt, vh) in enumerate(zip(truth_params.V, params.V), start=1):
        if vt.shape[1]:
            d[f"V{k}"] = grassmannian(vt, vh)
    angle = max_principal_angle(truth_params.loadings(), params.loadings())
    rec = recovery_error(truth_signal, EU, params.V0_full(), params.V)
    return MetricsReport(d, angle, rec)


def evaluate_fit(report: FitReport, truth) -> MetricsReport:
    """Shortcut for a fit report and a :class:`sifa.simulate.GroundTruth`."""
    return evaluate(report.params, report.moments.EU, truth.params, truth.signal)


# ---------------------------------------------------------------------------
# Variance explained
# ---------------------------------------------------------------------------


def linear_coefficients(cmap, q: int) -> np.ndarray:
    """q x r coefficient matrix of a linear (or lasso, or zero) covariate map."""
    if cmap.is_zero:
        return np.zeros((q, cmap.r))
    if any(f.family not in ("linear", "lasso") for f in cmap.fns):
        raise ValueError("variance attribution is defined only for linear covariate maps")
    B = np.column_stack([f.beta for f in cmap.fns])
    return B @ cmap.mixing()


def _sequential_shares(X, B, Vk, groups, total):
    """Sequential deterministic contributions of covariate groups, clipped at 0."""
    shares, prev = {}, 0.0
    used = np.zeros(X.shape[1], dtype=bool)
    for name, cols in groups.items():
        used[cols] = True
        cur = float(np.linalg.norm((X[:, used] @ B[used]) @ Vk.T) ** 2)
        shares[name] = max(cur - prev, 0.0)
        prev = cur
    s = sum(shares.values())
    det = float(np.linalg.norm((X @ B) @ Vk.T) ** 2)
    if s > det and s > 0:
        shares = {k: v * det / s for k, v in shares.items()}
    out = {k: (v / total if total > 0 else 0.0) for k, v in shares.items()}
    out["unknown"] = 1.0 - sum(out.values()) if total > 0 else 1.0
    return out


def variance_explained(report: FitReport, data: MultiViewDataset,
                       groups: Optional[Mapping[str, Sequence[int]]] = None) -> dict:
    """Model-based variance table per view.

    For view k the joint part is ||f0(X) V0k^T||^2 + n tr(V0k Sigma0 V0k^T), the
    individual part is the same with (f_k, V_k, Sigma_k) and the noise part is
    n p_k sigma_k^2; the three fractions sum to 1.  Within the joint and
    individual parts the deterministic variance is attributed to covariate
    groups sequentially (in the given order) and the remainder, including all
    random-factor variance, to ``"unknown"``.
    """
    params = report.params
    X = data.covariates
    n = data.n
    q = 0 if X is None else X.shape[1]
    if groups is None:
        groups = {"covariates": list(range(q))} if q else {}
    groups = {k: np.asarray(v, dtype=int) for k, v in groups.items()}
    covered = np.zeros(q, dtype=bool)
    for cols in groups.values():
        if np.any(covered[cols]):
            raise ValueError("covariate groups overlap")
        covered[cols] = True
    if q and not covered.all():
        groups["ungrouped"] = np.flatnonzero(~covered)
    Xm = X if X is not None else np.zeros((n, 0))
    B0 = linear_coefficients(params.covariate_fns[0], q)
    table = {}
    for k in range(params.K):
        V0k, Vk = params.V0[k], params.V[k]
        Bk = linear_coefficients(params.covariate_fns[k + 1], q)
        joint = float(np.linalg.norm((Xm @ B0) @ V0k.T) ** 2) + n * float(np.sum(V0k * V0k * params.Sigma0))
        indiv = float(np.linalg.norm((Xm @ Bk) @ Vk.T) ** 2) + n * float(np.sum(Vk * Vk * params.Sigma[k]))
        noise = n * V0k.shape[0] * float(params.noise_var[k])
        tot = joint + indiv + noise
        table[f"view{k + 1}"] = {
            "joint": joint / tot,
            "individual": indiv / tot,
            "noise": noise / tot,
            "joint_groups": _sequential_shares(Xm, B0, V0k, groups, joint),
            "individual_groups": _sequential_shares(Xm, Bk, Vk, groups, indiv),
        }
    return table


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def pca_baseline(Y: np.ndarray, r: int):
    """Top-r PCA of a centered matrix; returns ``(scores, loadings)``."""
    s = thin_svd(Y, r)
    return s.L * s.d, s.R


def supsvd(data: MultiViewDataset, r: int, options: FitOptions = FitOptions()) -> FitReport:
    """Supervised SVD as the single-view special case on the concatenated data."""
    from sifa.em import fit

    single = MultiViewDataset.from_arrays([data.stacked()], data.covariates, center=False)
    single = MultiViewDataset(single.views, single.covariates, data.centered)
    opts = options.replace(mode="orthogonal", regression_family="linear")
    rep = fit(single, RankSet(0, (r,)), opts)
    rep.label = "SupSVD (single-view SIFA)"
    return rep


def regress_out(data: MultiViewDataset) -> MultiViewDataset:
    """Views replaced by their OLS residuals on the covariates; covariates dropped."""
    X = data.covariates
    if X is None:
        raise ValueError("covariates are required")
    res = []
    for Y in data.arrays():
        beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
        res.append(Y - X @ beta)
    return MultiViewDataset(tuple(v.__class__(m, v.view_id) for v, m in zip(data.views, res)),
                            None, data.centered)


def cov_jive_baseline(data: MultiViewDataset, ranks: RankSet,
                      options: FitOptions = FitOptions()) -> FitReport:
    """Regress every view on the covariates, then fit the f=0 model to the residuals."""
    from sifa.em import fit

    rep = fit(regress_out(data), ranks, options)
    rep.label = "cov-JIVE (OLS residuals, f=0 fit)"
    rep.notes.append("pipeline: per-column OLS on covariates, then covariate-free fit")
    return rep
