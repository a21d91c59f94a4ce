"""Dense linear-algebra kernels shared by the estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla


class DegenerateRankError(np.linalg.LinAlgError):
    """A matrix that must have full column rank does not."""


class AsymmetricMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class ThinSvd:
    L: np.ndarray
    d: np.ndarray
    R: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.L * self.d) @ self.R.T


def _sign_flips(M: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """+-1 per column making each column's first non-negligible entry positive."""
    s = np.ones(M.shape[1])
    big = np.abs(M) > tol
    for j in range(M.shape[1]):
        nz = np.flatnonzero(big[:, j])
        if nz.size and M[nz[0], j] < 0:
            s[j] = -1.0
    return s


def thin_svd(A: np.ndarray, r: int) -> ThinSvd:
    """Top-``r`` singular triplets of ``A`` with left vectors sign-fixed."""
    A = np.asarray(A, dtype=float)
    if not 1 <= r <= min(A.shape):
        raise ValueError(f"rank {r} out of range for a {A.shape[0]}x{A.shape[1]} matrix")
    U, d, Vt = np.linalg.svd(A, full_matrices=False)
    L, d, R = U[:, :r], d[:r], Vt[:r].T
    s = _sign_flips(L)
    return ThinSvd(L * s, d.copy(), R * s)


def top_svd(A: np.ndarray, r: int) -> ThinSvd:
    """Leading ``r`` singular triplets via the smaller Gram matrix.

    Much cheaper than :func:`thin_svd` when ``r`` is small relative to the
    matrix, at the price of relative accuracy ~ eps * (d_1 / d_i)^2 in the
    trailing vectors, which is ample for starting values.
    """
    A = np.asarray(A, dtype=float)
    m = min(A.shape)
    if not 1 <= r <= m:
        raise ValueError(f"rank {r} out of range for a {A.shape[0]}x{A.shape[1]} matrix")
    if 4 * r > m:
        return thin_svd(A, r)
    tall = A.shape[0] >= A.shape[1]
    G = A.T @ A if tall else A @ A.T
    lam, W = sla.eigh(G, subset_by_index=(G.shape[0] - r, G.shape[0] - 1))
    W = W[:, ::-1]
    d = np.sqrt(np.maximum(lam[::-1], 0.0))
    if d[-1] <= 1e-10 * max(d[0], 1e-300):
        return thin_svd(A, r)
    if tall:
        R, L = W, (A @ W) / d
    else:
        L, R = W, (A.T @ W) / d
    s = _sign_flips(L)
    return ThinSvd(L * s, d, R * s)


def sym_eig_desc(S: np.ndarray, tol: float = 1e-8):
    """Eigen-decomposition of a symmetric matrix, eigenvalues non-increasing.

    Returns ``(Q, lam)`` with ``S = Q diag(lam) Q^T``.  Each eigenvector is
    sign-fixed so its first non-negligible entry is positive.
    """
    S = np.asarray(S, dtype=float)
    scale = max(np.max(np.abs(S)), 1.0) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > tol * scale:
        raise AsymmetricMatrixError("matrix is not symmetric within tolerance")
    lam, Q = np.linalg.eigh(0.5 * (S + S.T))
    lam, Q = lam[::-1], Q[:, ::-1]
    return Q * _sign_flips(Q), lam.copy()


def procrustes(M: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orthonormal-column W maximizing trace(M^T W), i.e. W = L R^T.

    Raises DegenerateRankError when M is numerically rank deficient; the
    maximizer is not unique then and the caller decides how to perturb.
    """
    M = np.asarray(M, dtype=float)
    p, r = M.shape
    if r == 0:
        return np.zeros((p, 0))
    if r > p:
        raise ValueError(f"procrustes needs r <= p, got {M.shape}")
    U, d, Vt = np.linalg.svd(M, full_matrices=False)
    if d[0] == 0 or d[-1] <= rtol * d[0]:
        raise DegenerateRankError(f"rank-deficient Procrustes input (smallest/largest sv = "
                                  f"{d[-1] / d[0] if d[0] else 0:.3g})")
    return U @ Vt


def center_columns(A: np.ndarray):
    """Subtract column means; returns ``(centered, means)``."""
    A = np.asarray(A, dtype=float)
    means = A.mean(axis=0)
    return A - means, means


# ---------------------------------------------------------------------------
# Woodbury machinery for Sigma* = G D G^T + Sigma_E
# ---------------------------------------------------------------------------


def assemble_loadings(V0_blocks: Sequence[np.ndarray], V_blocks: Sequence[np.ndarray]) -> np.ndarray:
    """(V0, blkdiag(V_1, ..., V_K)) as one dense matrix."""
    dims = [v.shape[0] for v in V_blocks]
    r0 = V0_blocks[0].shape[1] if len(V0_blocks) else 0
    rk = [v.shape[1] for v in V_blocks]
    G = np.zeros((sum(dims), r0 + sum(rk)))
    row, col = 0, r0
    for k, (p, r) in enumerate(zip(dims, rk)):
        G[row:row + p, :r0] = V0_blocks[k]
        G[row:row + p, col:col + r] = V_blocks[k]
        row += p
        col += r
    return G


def whitened_delta(V0_blocks, V_blocks, noise_var, orthogonal: bool = False) -> np.ndarray:
    """Delta = (V0, V*)^T Sigma_E^{-1} (V0, V*), built block by block.

    With ``orthogonal=True`` the loadings are assumed to satisfy the orthogonal
    conditions and the closed diagonal form is returned without any products.
    """
    K = len(V_blocks)
    r0 = V0_blocks[0].shape[1] if K else 0
    rk = [v.shape[1] for v in V_blocks]
    inv = 1.0 / np.asarray(noise_var, dtype=float)
    if orthogonal:
        return np.diag(np.concatenate([np.full(r0, inv.sum() / K),
                                       *[np.full(r, inv[k]) for k, r in enumerate(rk)]]))
    R = r0 + sum(rk)
    D = np.zeros((R, R))
    col = r0
    for k in range(K):
        v0k, vk = V0_blocks[k], V_blocks[k]
        sl = slice(col, col + rk[k])
        D[:r0, :r0] += inv[k] * (v0k.T @ v0k)
        cross = inv[k] * (v0k.T @ vk)
        D[:r0, sl] = cross
        D[sl, :r0] = cross.T
        D[sl, sl] = inv[k] * (vk.T @ vk)
        col += rk[k]
    return D


class WoodburyFactor:
    """Factored form of Sigma* exposing solves, log-determinant and posterior.

    With factor variances ``d`` (D = diag(d)) and ``Delta`` as above, the
    inner matrix M = D^{-1} + Delta is handled as D^{-1/2} B D^{-1/2} with
    B = I + D^{1/2} Delta D^{1/2}, which stays well conditioned for tiny or
    huge factor variances.
    """

    def __init__(self, delta: np.ndarray, factor_var: np.ndarray):
        d = np.asarray(factor_var, dtype=float)
        if np.any(d <= 0):
            raise np.linalg.LinAlgError("factor variances must be positive")
        self.delta = delta
        self.sqrt_d = np.sqrt(d)
        R = d.size
        B = np.eye(R) + self.sqrt_d[:, None] * delta * self.sqrt_d[None, :]
        if R:
            self._chol = sla.cho_factor(B, lower=True)
            self.logdet_B = 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))
        else:
            self._chol = None
            self.logdet_B = 0.0

    def solve_inner(self, A: np.ndarray) -> np.ndarray:
        """M^{-1} A for A with R rows."""
        if self._chol is None:
            return np.zeros_like(A)
        s = self.sqrt_d.reshape((-1,) + (1,) * (A.ndim - 1))
        return s * sla.cho_solve(self._chol, s * A)

    def inner_inverse(self) -> np.ndarray:
        """M^{-1}; equals the posterior covariance of the latent factors."""
        R = self.sqrt_d.size
        out = self.solve_inner(np.eye(R))
        return 0.5 * (out + out.T)


def whitened_quadform(V0_blocks, V_blocks, Sigma0, Sigma_list, noise_var,
                      orthogonal: bool = False) -> np.ndarray:
    """(V0, V*)^T Sigma*^{-1} (V0, V*) via the Woodbury identity.

    Computes Delta - Delta (blkdiag(Sigma0^{-1}, Sigma_F^{-1}) + Delta)^{-1} Delta
    without forming any sum(p) x sum(p) matrix.
    """
    if np.any(np.asarray(noise_var) <= 0):
        raise ValueError("noise variances must be positive")
    delta = whitened_delta(V0_blocks, V_blocks, noise_var, orthogonal=orthogonal)
    fv = np.concatenate([np.asarray(Sigma0, float), *[np.asarray(s, float) for s in Sigma_list]])
    wf = WoodburyFactor(delta, fv)
    out = delta - delta @ wf.solve_inner(delta)
    return 0.5 * (out + out.T)
