"""Random instances and dense oracles shared by the test modules.

The generators here are deliberately independent of ``sifa.simulate`` so the
estimator is checked against data it did not produce itself.
"""
import numpy as np

from sifa.core import CovariateMap, MultiViewDataset, RankSet, SifaParams
from sifa.regression import RegressionFn


def orth(rng, p, r):
    if r == 0:
        return np.zeros((p, 0))
    Q, R = np.linalg.qr(rng.standard_normal((p, r)))
    return Q * np.sign(np.diag(R))


def linear_map(rng, q, r, scale=1.0):
    if r == 0:
        return CovariateMap.zero(0)
    fns = tuple(RegressionFn("linear", q, beta=scale * rng.standard_normal(q)) for _ in range(r))
    return CovariateMap(r, fns)


def random_params(rng, dims, ranks: RankSet, orthogonal=True, q=None, scale=1.0):
    """Parameters meeting the orthogonal (or only the basic) conditions."""
    K = len(dims)
    r0 = ranks.r0
    if orthogonal:
        V0, V = [], []
        for p, rk in zip(dims, ranks.r):
            W = orth(rng, p, r0 + rk)
            V0.append(W[:, :r0] / np.sqrt(K))
            V.append(W[:, r0:])
    else:
        G0 = orth(rng, sum(dims), r0)
        V0, row = [], 0
        for p in dims:
            V0.append(G0[row:row + p])
            row += p
        V = [orth(rng, p, rk) for p, rk in zip(dims, ranks.r)]
    Sigma0 = np.sort(rng.uniform(1.0, 4.0, r0))[::-1] * scale
    Sigma = tuple(np.sort(rng.uniform(0.5, 3.0, rk))[::-1] * scale for rk in ranks.r)
    noise = rng.uniform(0.2, 1.0, K)
    if q:
        fns = tuple(linear_map(rng, q, r) for r in ranks.all())
    else:
        fns = tuple(CovariateMap.zero(r) for r in ranks.all())
    return SifaParams(fns, tuple(V0), tuple(V), Sigma0, Sigma, noise)


def sample(rng, params: SifaParams, n, q=None, center=False):
    """Draw (data, U) from the model; covariates are standard normal."""
    X = None if not q else rng.standard_normal((n, q))
    F = params.mean_factors(X, n)
    sd = np.sqrt(params.factor_variances())
    U = F + rng.standard_normal(F.shape) * sd
    G = params.loadings()
    noise_sd = np.concatenate([np.full(p, np.sqrt(s)) for p, s in zip(params.dims, params.noise_var)])
    Y = U @ G.T + rng.standard_normal((n, G.shape[0])) * noise_sd
    views, row = [], 0
    for p in params.dims:
        views.append(Y[:, row:row + p])
        row += p
    return MultiViewDataset.from_arrays(views, X, center=center), U


def dense_sigma(params: SifaParams) -> np.ndarray:
    G = params.loadings()
    noise = np.concatenate([np.full(p, s) for p, s in zip(params.dims, params.noise_var)])
    return (G * params.factor_variances()) @ G.T + np.diag(noise)


def dense_loglik(params: SifaParams, data: MultiViewDataset) -> float:
    """Gaussian log-density summed over rows, from the dense covariance."""
    S = dense_sigma(params)
    mu = params.mean_factors(data.covariates, data.n) @ params.loadings().T
    R = data.stacked() - mu
    sign, logdet = np.linalg.slogdet(S)
    assert sign > 0
    quad = np.sum(R * np.linalg.solve(S, R.T).T)
    return float(-0.5 * data.n * (S.shape[0] * np.log(2 * np.pi) + logdet) - 0.5 * quad)


def dense_posterior(params: SifaParams, data: MultiViewDataset):
    """E(U | Y) and Cov(U | Y) by Gaussian conditioning on the dense joint law."""
    S = dense_sigma(params)
    D = np.diag(params.factor_variances())
    G = params.loadings()
    F = params.mean_factors(data.covariates, data.n)
    R = data.stacked() - F @ G.T
    K = np.linalg.solve(S, G @ D)  # Sigma^{-1} G D
    return F + R @ K, D - D @ G.T @ K


# One summary line per acceptance criterion; printed by conftest after the run.
ACCEPTANCE_LINES: list = []


def report_criterion(label: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {label} {'PASS' if ok else 'FAIL'}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def planted_rank_views(seed=0, joint=25, individual=(25, 6, 21), tails=(5.0, 2.9, 4.5),
                       dims=(100, 60, 80), n=200, n_tail=20):
    """Views whose 90%-variance signal ranks are planted exactly.

    All score vectors are orthonormal and centered, so view k has singular
    values 1 (joint and individual components) plus ``n_tail`` equal small
    ones carrying total power ``tails[k]``; the concatenation has singular
    values sqrt(K) for joint components.  With the defaults the per-view
    ranks at threshold 0.9 are 50, 31, 46 and the concatenated rank is 76.
    """
    rng = np.random.default_rng(seed)
    K = len(dims)
    n_comp = joint + sum(individual) + K * n_tail
    Z = rng.standard_normal((n, n_comp))
    U = np.linalg.qr(Z - Z.mean(axis=0))[0]
    views, col = [], joint
    for k in range(K):
        idx = list(range(joint)) + list(range(col, col + individual[k]))
        col += individual[k]
        tail = list(range(col, col + n_tail))
        col += n_tail
        s = np.r_[np.ones(len(idx)), np.full(n_tail, np.sqrt(tails[k] / n_tail))]
        V = orth(rng, dims[k], len(idx) + n_tail)
        views.append((U[:, idx + tail] * s) @ V.T)
    return views
