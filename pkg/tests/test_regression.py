import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import sifa.regression as reg
from sifa import _backend, _pykernels

BACKENDS = [pytest.param(_pykernels, id="python")]
if _backend.compiled_kernels is not None:
    BACKENDS.append(pytest.param(_backend.compiled_kernels, id="compiled"))


@pytest.fixture(params=BACKENDS)
def kernels(request, monkeypatch):
    monkeypatch.setattr(reg, "kernels", request.param)
    return request.param


def test_compiled_backend_selected():
    # The extension is part of the build; the fallback is only for
    # environments without a compiler.
    assert _backend.COMPILED == (_backend.compiled_kernels is not None)


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


def test_fit_linear_matches_lstsq(rng):
    X = rng.standard_normal((40, 4))
    y = rng.standard_normal(40)
    f = reg.fit_linear(X, y)
    np.testing.assert_allclose(f.beta, np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-10)
    np.testing.assert_allclose(reg.predict(f, X[:3]), X[:3] @ f.beta)
    assert f.jitter == 0.0


def test_fit_linear_needs_more_rows(rng):
    with pytest.raises(ValueError, match="lasso"):
        reg.fit_linear(rng.standard_normal((3, 5)), rng.standard_normal(3))


def test_fit_linear_jitter_on_collinear(rng):
    x = rng.standard_normal(30)
    X = np.column_stack([x, x, rng.standard_normal(30)])
    assert reg.fit_linear(X, rng.standard_normal(30)).jitter > 0


def test_predict_dimension_check(rng):
    f = reg.fit_linear(rng.standard_normal((20, 3)), rng.standard_normal(20))
    with pytest.raises(ValueError):
        reg.predict(f, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------


def _kkt_violation(X, y, beta, lam):
    n = X.shape[0]
    g = X.T @ (y - X @ beta) / n
    active = beta != 0
    v1 = np.abs(g[active] - lam * np.sign(beta[active]))
    v2 = np.maximum(np.abs(g[~active]) - lam, 0.0)
    return max(v1.max(initial=0.0), v2.max(initial=0.0))


@settings(max_examples=30, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1), frac=st.floats(0.01, 0.9))
def test_lasso_cd_satisfies_kkt(seed, frac):
    rng = np.random.default_rng(seed)
    n, q = 60, 8
    X = rng.standard_normal((n, q))
    y = X[:, :3] @ np.array([2.0, -1.0, 0.5]) + rng.standard_normal(n)
    lam = frac * reg.lambda_max(X, y)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    for mod in [p.values[0] for p in BACKENDS]:
        beta = np.zeros(q)
        mod.lasso_cd(np.asfortranarray(X), y, lam, beta, col_sq, 1e-12, 100000)
        assert _kkt_violation(X, y, beta, lam) < 1e-8


def test_backends_agree_on_lasso(rng):
    X = rng.standard_normal((50, 6))
    y = rng.standard_normal(50)
    col_sq = np.einsum("ij,ij->j", X, X) / 50
    out = []
    for mod in [p.values[0] for p in BACKENDS]:
        beta = np.zeros(6)
        mod.lasso_cd(np.asfortranarray(X), y, 0.05, beta, col_sq, 1e-12, 10000)
        out.append(beta)
    for b in out[1:]:
        np.testing.assert_allclose(b, out[0], atol=1e-10)


def test_lambda_max_gives_zero(kernels, rng):
    X = rng.standard_normal((40, 5))
    y = rng.standard_normal(40)
    path = reg.lasso_path(X, y, [reg.lambda_max(X, y) * 1.0000001])
    np.testing.assert_array_equal(path[0], 0.0)


def test_fit_lasso_recovers_support(kernels, rng):
    X = rng.standard_normal((200, 10))
    y = 3 * X[:, 0] - 2 * X[:, 4] + 0.1 * rng.standard_normal(200)
    f = reg.fit_lasso(X, y, seed=1)
    assert {0, 4} <= set(f.active.tolist())
    assert abs(f.beta[0] - 3) < 0.2 and abs(f.beta[4] + 2) < 0.2


def test_fit_lasso_tie_goes_to_larger_penalty(kernels, rng):
    # Every penalty above lambda_max of every training fold gives the zero
    # model, so the CV errors of the leading grid points tie exactly.
    X = rng.standard_normal((30, 3))
    y = rng.standard_normal(30)
    top = 100 * reg.lambda_max(X, y)
    f = reg.fit_lasso(X, y, lambda_grid=[top, top / 2, top / 4], folds=3)
    assert f.lam == top
    np.testing.assert_array_equal(f.beta, 0.0)


def test_fit_lasso_drops_zero_columns(kernels, rng):
    X = rng.standard_normal((30, 3))
    X[:, 1] = 0.0
    with pytest.warns(UserWarning, match="all-zero"):
        f = reg.fit_lasso(X, X[:, 0], folds=3)
    assert f.beta[1] == 0.0


@pytest.mark.parametrize("grid", [[0.1, 0.2], [], [0.1, -0.1]])
def test_fit_lasso_grid_validation(kernels, rng, grid):
    with pytest.raises(ValueError):
        reg.fit_lasso(rng.standard_normal((30, 2)), rng.standard_normal(30), lambda_grid=grid, folds=3)


def test_fit_lasso_needs_rows(kernels, rng):
    with pytest.raises(ValueError):
        reg.fit_lasso(rng.standard_normal((10, 2)), rng.standard_normal(10), folds=5)


def test_fit_lasso_deterministic(kernels, rng):
    X = rng.standard_normal((60, 5))
    y = X[:, 0] + rng.standard_normal(60)
    a, b = reg.fit_lasso(X, y, seed=3), reg.fit_lasso(X, y, seed=3)
    assert a.lam == b.lam
    np.testing.assert_array_equal(a.beta, b.beta)


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def _naive_nw(Xt, y, h, Xe, loo=False):
    out = np.empty(len(Xe))
    for i, x in enumerate(Xe):
        w = np.array([np.exp(-0.5 * np.sum(((x - xt) / h) ** 2)) for xt in Xt])
        if loo:
            w[i] = 0.0
        out[i] = np.sum(w * y) / np.sum(w)
    return out


@pytest.mark.parametrize("loo", [False, True])
def test_nw_smooth_matches_naive(kernels, rng, loo):
    Xt = rng.uniform(-1, 1, (25, 2))
    y = rng.standard_normal(25)
    h = np.array([0.3, 0.5])
    got = kernels.nw_smooth(Xt, y[:, None], h, Xt, loo)[:, 0]
    np.testing.assert_allclose(got, _naive_nw(Xt, y, h, Xt, loo), rtol=1e-12)


def test_nw_smooth_far_points_stable(kernels):
    # Evaluating far from the data must not underflow every weight to zero.
    Xt = np.array([[0.0], [1.0]])
    out = kernels.nw_smooth(Xt, np.array([[1.0], [3.0]]), np.array([1e-3]), np.array([[50.0]]))
    np.testing.assert_allclose(out, [[3.0]])


def test_silverman(rng):
    X = rng.standard_normal((100, 2))
    np.testing.assert_allclose(reg.silverman_bandwidth(X), 1.06 * X.std(axis=0, ddof=1) * 100 ** -0.2)


def test_fit_kernel_policies(kernels, rng):
    x = rng.uniform(-1, 1, 80)
    y = np.sin(np.pi * x) + 0.1 * rng.standard_normal(80)
    for policy in ("silverman", "loocv", 0.2, ("fixed", 0.3)):
        f = reg.fit_kernel(x, y, policy)
        assert f.bandwidth.shape == (1,) and f.bandwidth[0] > 0
    f = reg.fit_kernel(x, y, "loocv")
    assert np.mean((reg.predict(f, x) - np.sin(np.pi * x)) ** 2) < 0.05
    with pytest.raises(ValueError):
        reg.fit_kernel(x, y, "nope")
    with pytest.raises(ValueError):
        reg.fit_kernel(rng.standard_normal((50, 6)), y[:50])


def test_smoother_matrix_rows_sum_to_one(kernels, rng):
    X = rng.standard_normal((20, 2))
    h = reg.silverman_bandwidth(X)
    S = reg.smoother_matrix(X, h)
    np.testing.assert_allclose(S.sum(axis=1), 1.0)
    Y = rng.standard_normal((20, 3))
    np.testing.assert_allclose(S @ Y, kernels.nw_smooth(X, Y, h, X), rtol=1e-12)


# ---------------------------------------------------------------------------
# Batch regressor and bank
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family", ["linear", "lasso", "kernel"])
def test_column_regressor_fitted_matches_predict(kernels, rng, family):
    X = rng.standard_normal((60, 2))
    Y = np.column_stack([X[:, 0] ** 2, X[:, 1]]) + 0.1 * rng.standard_normal((60, 2))
    fns, fitted = reg.ColumnRegressor(X, family).fit(Y)
    assert len(fns) == 2
    for j, f in enumerate(fns):
        np.testing.assert_allclose(reg.predict(f, X), fitted[:, j], rtol=1e-9, atol=1e-12)


def test_column_regressor_empty(rng):
    fns, fitted = reg.ColumnRegressor(rng.standard_normal((20, 2))).fit(np.zeros((20, 0)))
    assert fns == [] and fitted.shape == (20, 0)


def test_function_bank_standardized():
    x = np.linspace(-1, 1, 200001)
    for name, g in reg.FUNCTION_BANK.items():
        v = g(x)
        assert abs(v.mean()) < 1e-4, name
        assert abs(v.var() - 1) < 1e-3, name
    assert reg.FUNCTION_BANK["sine"](np.array([0.0]))[0] == 0.0
    q = reg.FUNCTION_BANK["quadratic"]
    np.testing.assert_allclose(q(x), q(-x))
