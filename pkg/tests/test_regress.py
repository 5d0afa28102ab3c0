import numpy as np
import pytest

from ivpsr.errors import RegressionError
from ivpsr.regress import (
    FittedRegressor, fit, fit_cme, fit_lasso, fit_linear, fit_logistic, logistic_gradient, logistic_objective,
    predict, soft_threshold,
)
from ivpsr.schemas import KernelSpec, RegressorSpec


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# Linear Regression Tests
def test_identity_design_returns_targets():
    Y = np.arange(6.0).reshape(3, 2)
    reg = fit_linear(np.eye(3), Y)
    np.testing.assert_allclose(reg.weights, Y.T, atol=1e-12)


def test_ridge_matches_normal_equations(rng):
    X, Y = rng.standard_normal((20, 3)), rng.standard_normal((20, 2))
    reg = fit_linear(X, Y, lam0=0.1)
    expected = np.linalg.solve(X.T @ X + 0.1 * np.eye(3), X.T @ Y)
    np.testing.assert_allclose(reg.weights, expected.T, atol=1e-8)


def test_heavy_ridge_shrinks(rng):
    X, Y = rng.uniform(-1, 1, (30, 4)), rng.uniform(-1, 1, (30, 2))
    reg = fit_linear(X, Y, lam0=1e9)
    assert np.linalg.norm(reg.weights) <= 1e-3 * np.linalg.norm(X.T @ Y)


def test_ridge_norm_nonincreasing(rng):
    X, Y = rng.standard_normal((25, 5)), rng.standard_normal((25, 3))
    norms = [np.linalg.norm(fit_linear(X, Y, lam0=lam).weights) for lam in (0.0, 0.01, 0.1, 1.0, 10.0)]
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


def test_rank_deficient_fallback_and_strict(rng, caplog):
    x = rng.standard_normal((10, 1))
    X = np.hstack([x, x])
    Y = 3 * x
    reg = fit_linear(X, Y)
    assert "pseudo-inverse" in caplog.text
    np.testing.assert_allclose(predict(reg, X), Y, atol=1e-8)
    with pytest.raises(RegressionError):
        fit_linear(X, Y, strict=True)


def test_residual_moment_is_uncentered(rng):
    X = np.ones((50, 1))
    Y = rng.standard_normal((50, 2))
    reg = fit_linear(X, Y)
    resid = Y - Y.mean(axis=0)
    np.testing.assert_allclose(reg.residual_cov, resid.T @ resid / 50, atol=1e-10)


def test_weighted_rows_equal_repeated_rows(rng):
    X, Y = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
    w = np.array([1, 2, 1, 3, 1, 1], dtype=float)
    weighted = fit_linear(X, Y, weights=w)
    repeated = fit_linear(np.repeat(X, w.astype(int), axis=0), np.repeat(Y, w.astype(int), axis=0))
    np.testing.assert_allclose(weighted.weights, repeated.weights, atol=1e-10)


# Logistic Regression Tests
def test_uninformative_targets(rng):
    X = rng.standard_normal((40, 3))
    reg = fit_logistic(X, np.full((40, 1), 0.5))
    np.testing.assert_allclose(reg.weights, 0.0, atol=1e-6)
    np.testing.assert_allclose(reg.intercept, 0.0, atol=1e-6)
    np.testing.assert_allclose(predict(reg, X), 0.5, atol=1e-6)


def test_logistic_stationarity(rng):
    X = rng.standard_normal((200, 3))
    y = (rng.random(200) < 1 / (1 + np.exp(-X @ [1.0, -0.5, 0.2]))).astype(float)
    reg = fit_logistic(X, y)
    Z = np.hstack([np.ones((200, 1)), X])
    beta = np.concatenate([reg.intercept, reg.weights[0]])
    assert reg.converged
    assert np.linalg.norm(logistic_gradient(beta, Z, y, np.ones(200), 1e-8)) <= 1e-6 * 200


def test_logistic_gradient_finite_differences(rng):
    Z = rng.standard_normal((30, 4))
    y = rng.random(30)
    w = np.ones(30)
    beta = rng.standard_normal(4)
    h = 1e-6
    numeric = np.array([
        (logistic_objective(beta + h * e, Z, y, w, 1e-8) - logistic_objective(beta - h * e, Z, y, w, 1e-8)) / (2 * h)
        for e in np.eye(4)
    ])
    analytic = logistic_gradient(beta, Z, y, w, 1e-8)
    assert np.linalg.norm(numeric - analytic) <= 1e-4 * np.linalg.norm(analytic)


def test_logistic_recovers_generating_weights(rng):
    n = 100000
    X = rng.standard_normal((n, 2))
    true = np.array([1.5, -1.0])
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.5 + X @ true)))).astype(float)
    reg = fit_logistic(X, y)
    np.testing.assert_allclose(reg.weights[0], true, rtol=0.05)
    assert np.all((predict(reg, X[:10]) > 0) & (predict(reg, X[:10]) < 1))


# Lasso Tests
def test_lasso_zero_alpha_is_ols(rng):
    X = rng.standard_normal((50, 4))
    y = X @ [1.0, 0.0, -2.0, 0.5] + 0.1 * rng.standard_normal(50)
    lasso = fit_lasso(X, y, 0.0)
    Z = np.hstack([np.ones((50, 1)), X])
    ols = np.linalg.lstsq(Z, y, rcond=None)[0]
    np.testing.assert_allclose(lasso.weights[0], ols[1:], atol=1e-6)
    np.testing.assert_allclose(lasso.intercept[0], ols[0], atol=1e-6)


def test_lasso_full_shrinkage(rng):
    X = rng.standard_normal((40, 3))
    y = rng.standard_normal(40)
    Xc, yc = X - X.mean(0), y - y.mean()
    alpha = np.max(np.abs(Xc.T @ yc)) / 40 + 1e-9
    np.testing.assert_array_equal(fit_lasso(X, y, alpha).weights, 0.0)


def test_lasso_orthonormal_design_soft_threshold():
    n = 64
    rng = np.random.default_rng(0)
    # Columns orthogonal to the constant, so centring leaves X^T X = n I
    Q, _ = np.linalg.qr(np.hstack([np.ones((n, 1)), rng.standard_normal((n, 4))]))
    X = np.sqrt(n) * Q[:, 1:]
    y = X @ [0.9, -0.05, 0.3, 0.0] + 0.01 * rng.standard_normal(n)
    reg = fit_lasso(X, y, 0.1)
    expected = soft_threshold(X.T @ (y - y.mean()) / n, 0.1)
    np.testing.assert_allclose(reg.weights[0], expected, atol=1e-8)


def test_lasso_kkt(rng):
    X = rng.standard_normal((80, 6)) * [1, 2, 0.5, 1, 3, 1]
    y = X @ [1.0, 0.0, 0.0, -0.5, 0.0, 0.2] + 0.3 * rng.standard_normal(80)
    alpha = 0.1
    reg = fit_lasso(X, y, alpha)
    beta = reg.weights[0]
    Xc, yc = X - X.mean(0), y - y.mean()
    corr = Xc.T @ (yc - Xc @ beta) / 80
    for j in range(6):
        if beta[j] == 0:
            assert abs(corr[j]) <= alpha + 1e-6
        else:
            assert abs(corr[j] - alpha * np.sign(beta[j])) <= 1e-6
    assert reg.converged


def test_lasso_flags_non_convergence(rng):
    X = rng.standard_normal((30, 5))
    reg = fit_lasso(X, rng.standard_normal((30, 2)), 0.01, max_iter=1)
    assert not reg.converged
    assert reg.column_converged.shape == (2,)


# Conditional Mean Embedding Tests
def test_cme_identity():
    np.testing.assert_allclose(fit_cme(np.eye(3), 1.0), 0.5 * np.eye(3))


def test_cme_residual(rng):
    A = rng.standard_normal((6, 6))
    G = A @ A.T
    B = fit_cme(G, 0.1)
    np.testing.assert_allclose((G + 0.1 * np.eye(6)) @ B, G, atol=1e-8)
    assert np.linalg.norm(fit_cme(G, 1e8)) < 1e-6


def test_cme_requires_positive_lambda():
    with pytest.raises(RegressionError):
        fit_cme(np.eye(2), 0.0)


# Dispatch and Prediction Tests
def test_predict_dimension_mismatch(rng):
    reg = fit_linear(rng.standard_normal((5, 2)), rng.standard_normal((5, 1)))
    with pytest.raises(RegressionError):
        predict(reg, np.ones(3))


def test_fit_dispatch_and_record(rng):
    X, Y = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
    reg = fit(X, Y, RegressorSpec(method="ridge", lam0=0.5))
    assert reg.method == "ridge"
    restored = FittedRegressor.from_record(reg.to_record())
    np.testing.assert_array_equal(predict(restored, X), predict(reg, X))


def test_kernel_ridge_rejects_weights(rng):
    spec = RegressorSpec(method="kernel_ridge", kernel=KernelSpec(kind="rbf", bandwidth=1.0))
    with pytest.raises(RegressionError):
        fit(rng.standard_normal((4, 1)), rng.standard_normal((4, 1)), spec, weights=np.ones(4))


def test_kernel_ridge_fit_and_predict():
    X = np.linspace(-2, 2, 40)[:, None]
    Y = np.sin(X)
    spec = RegressorSpec(method="kernel_ridge", kernel=KernelSpec(kind="rbf", bandwidth=0.5, lam0=1e-3))
    reg = fit(X, Y, spec)
    assert reg.method == "kernel_ridge"
    assert reg.d_in == 1
    G = np.exp(-(X - X.T) ** 2 / (2 * 0.5 ** 2))
    np.testing.assert_allclose(predict(reg, X), G @ np.linalg.solve(G + 1e-3 * np.eye(40), Y), atol=1e-6)
    H = np.linspace(-1.9, 1.9, 7)[:, None]
    np.testing.assert_allclose(predict(reg, H), np.sin(H), atol=2e-2)
    assert predict(reg, np.array([0.3])).shape == (1,)
