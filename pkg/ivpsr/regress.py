"""Stage-1 regressions behind one fit / predict contract."""
from dataclasses import dataclass, field
from typing import Any, Dict, Optional
import logging

import numpy as np
from scipy import linalg
from scipy.special import expit

from ivpsr.config import settings
from ivpsr.errors import RegressionError
from ivpsr.schemas import FittedRegressorRecord, KernelSpec, RegressorSpec

logger = logging.getLogger(__name__)


@dataclass
class FittedRegressor:
    method: str
    weights: np.ndarray
    intercept: np.ndarray
    residual_cov: np.ndarray
    n_samples: int
    converged: bool = True
    column_converged: Optional[np.ndarray] = None
    kernel_data: Optional[Dict[str, Any]] = field(default=None, repr=False)

    @property
    def d_in(self) -> int:
        if self.kernel_data is not None:
            return self.kernel_data["X"].shape[1]
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return len(self.intercept)

    def to_record(self) -> FittedRegressorRecord:
        if self.kernel_data is not None:
            raise RegressionError("kernel regressors hold training data and are not serialised")
        return FittedRegressorRecord(
            method=self.method, weights=self.weights.tolist(),
            intercept=self.intercept.tolist(), residual_cov=self.residual_cov.tolist(),
            n_samples=self.n_samples, converged=self.converged,
        )

    @classmethod
    def from_record(cls, record: FittedRegressorRecord) -> "FittedRegressor":
        return cls(
            method=record.method, weights=np.asarray(record.weights, float),
            intercept=np.asarray(record.intercept, float),
            residual_cov=np.asarray(record.residual_cov, float),
            n_samples=record.n_samples, converged=record.converged,
        )


# Linear algebra helpers
def pinv_truncated(A: np.ndarray, rcond: Optional[float] = None) -> np.ndarray:
    """Pseudo-inverse dropping singular values below rcond * sigma_max"""
    rcond = settings.pinv_rcond if rcond is None else rcond
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(A.T.shape)
    keep = s > rcond * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def ridge_solve(G: np.ndarray, C: np.ndarray, lam: float, strict: Optional[bool] = None) -> np.ndarray:
    """Solve (G + lam I) X = C for symmetric PSD G"""
    strict = settings.strict_linear if strict is None else strict
    d = G.shape[0]
    if lam > 0:
        try:
            return linalg.cho_solve(linalg.cho_factor(G + lam * np.eye(d)), C)
        except linalg.LinAlgError:
            logger.warning(f"Cholesky failed for ridge system (lam={lam:g}); using pseudo-inverse")
            return pinv_truncated(G + lam * np.eye(d)) @ C
    s = np.linalg.svd(G, compute_uv=False)
    if s.size and s[0] > 0 and s[-1] > settings.pinv_rcond * s[0]:
        return linalg.solve(G, C, assume_a="sym")
    if strict:
        raise RegressionError("rank-deficient design with zero regularisation")
    logger.warning(f"Rank-deficient design ({d} columns) with zero regularisation; using truncated pseudo-inverse")
    return pinv_truncated(G) @ C


def _as_matrix(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    return Y[:, None] if Y.ndim == 1 else Y


def _weights(n: int, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise RegressionError("weights must be a nonnegative vector with one entry per row")
    return w


def residual_second_moment(resid: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Uncentered weighted mean of r r^T"""
    R = (resid * w[:, None]).T @ resid / w.sum()
    return (R + R.T) / 2


def _check_shapes(X: np.ndarray, Y: np.ndarray) -> None:
    if X.ndim != 2 or len(X) < 1:
        raise RegressionError("design must be a non-empty N x d matrix")
    if len(Y) != len(X):
        raise RegressionError(f"design has {len(X)} rows, targets have {len(Y)}")


# Fits
def fit_linear(
    X: np.ndarray,
    Y: np.ndarray,
    lam0: float = 0.0,
    weights: Optional[np.ndarray] = None,
    strict: Optional[bool] = None,
) -> FittedRegressor:
    """W = argmin sum_i w_i ||y_i - W x_i||^2 + lam0 ||W||^2"""
    if lam0 < 0:
        raise RegressionError(f"lam0 must be >= 0, got {lam0}")
    X = np.asarray(X, dtype=float)
    Y = _as_matrix(Y)
    _check_shapes(X, Y)
    w = _weights(len(X), weights)
    Xw = X * w[:, None]
    W = ridge_solve(Xw.T @ X, Xw.T @ Y, lam0, strict).T
    resid = Y - X @ W.T
    return FittedRegressor(
        method="ridge" if lam0 > 0 else "ols", weights=W, intercept=np.zeros(Y.shape[1]),
        residual_cov=residual_second_moment(resid, w), n_samples=len(X),
    )


def logistic_objective(beta: np.ndarray, Z: np.ndarray, y: np.ndarray, w: np.ndarray, jitter: float) -> float:
    eta = Z @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))) - 0.5 * jitter * beta @ beta)


def logistic_gradient(beta: np.ndarray, Z: np.ndarray, y: np.ndarray, w: np.ndarray, jitter: float) -> np.ndarray:
    return Z.T @ (w * (y - expit(Z @ beta))) - jitter * beta


def _newton_logistic(Z, y, w, max_iter, tol, jitter):
    beta = np.zeros(Z.shape[1])
    obj = logistic_objective(beta, Z, y, w, jitter)
    eye = np.eye(Z.shape[1])
    scale = max(w.sum(), 1.0)
    for _ in range(max_iter):
        grad = logistic_gradient(beta, Z, y, w, jitter)
        if np.max(np.abs(grad)) <= tol * scale:
            return beta, True
        mu = expit(Z @ beta)
        hess = (Z * (w * mu * (1 - mu))[:, None]).T @ Z + jitter * eye
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except linalg.LinAlgError:
            step = pinv_truncated(hess) @ grad
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            cand_obj = logistic_objective(cand, Z, y, w, jitter)
            if cand_obj >= obj:
                break
            t *= 0.5
        else:
            # No ascent direction left at working precision
            return beta, bool(np.max(np.abs(grad)) <= 1e-6 * scale)
        beta, obj = cand, cand_obj
        if np.max(np.abs(t * step)) < tol:
            return beta, True
    return beta, False


def fit_logistic(
    X: np.ndarray,
    Y: np.ndarray,
    weights: Optional[np.ndarray] = None,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
    jitter: Optional[float] = None,
) -> FittedRegressor:
    """Per-coordinate Bernoulli regression with intercept, damped Newton"""
    max_iter = max_iter or settings.logistic_max_iter
    tol = tol or settings.logistic_tol
    jitter = settings.logistic_jitter if jitter is None else jitter
    X = np.asarray(X, dtype=float)
    Y = _as_matrix(Y)
    _check_shapes(X, Y)
    if np.any(Y < 0) or np.any(Y > 1):
        raise RegressionError("logistic targets must lie in [0, 1]")
    w = _weights(len(X), weights)
    Z = np.hstack([np.ones((len(X), 1)), X])
    coefs, flags = [], []
    for j in range(Y.shape[1]):
        beta, ok = _newton_logistic(Z, Y[:, j], w, max_iter, tol, jitter)
        if not ok:
            logger.warning(f"Logistic regression for output {j} did not converge in {max_iter} iterations")
        coefs.append(beta)
        flags.append(ok)
    coefs = np.array(coefs)
    reg = FittedRegressor(
        method="logistic", weights=coefs[:, 1:], intercept=coefs[:, 0],
        residual_cov=np.zeros((Y.shape[1], Y.shape[1])), n_samples=len(X),
        converged=all(flags), column_converged=np.array(flags),
    )
    reg.residual_cov = residual_second_moment(Y - predict(reg, X), w)
    return reg


def soft_threshold(z: np.ndarray, alpha: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - alpha, 0.0)


def _lasso_path(G: np.ndarray, c: np.ndarray, penalty: np.ndarray, max_iter: int, tol: float):
    """Covariance-update coordinate descent on 1/2 g'Gg - c'g + sum penalty|g|"""
    d = len(c)
    gamma = np.zeros(d)
    Gg = np.zeros(d)
    diag = np.diag(G)
    active = np.flatnonzero(diag > 0)
    for _ in range(max_iter):
        max_change = 0.0
        for j in active:
            old = gamma[j]
            z = c[j] - Gg[j] + diag[j] * old
            new = soft_threshold(z, penalty[j]) / diag[j]
            if new != old:
                Gg += G[:, j] * (new - old)
                gamma[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            return gamma, True
    return gamma, False


def fit_lasso(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
) -> FittedRegressor:
    """1/2 ||y - b - X beta||^2 / N + alpha ||beta||_1, one output column at a time"""
    if alpha < 0:
        raise RegressionError(f"alpha must be >= 0, got {alpha}")
    max_iter = max_iter or settings.lasso_max_iter
    tol = tol or settings.lasso_tol
    X = np.asarray(X, dtype=float)
    Y = _as_matrix(y)
    _check_shapes(X, Y)
    n = len(X)
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    scale = Xc.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = Xc / scale
    G = Xs.T @ Xs / n
    # Penalty stays on the original coefficients: alpha |beta_j| = (alpha / scale_j) |gamma_j|
    penalty = alpha / scale
    betas, flags = [], []
    for j in range(Y.shape[1]):
        gamma, ok = _lasso_path(G, Xs.T @ Yc[:, j] / n, penalty, max_iter, tol)
        if not ok:
            logger.warning(f"Lasso for output {j} did not converge in {max_iter} sweeps")
        betas.append(gamma / scale)
        flags.append(ok)
    B = np.array(betas)
    intercept = y_mean - B @ x_mean
    resid = Y - X @ B.T - intercept
    return FittedRegressor(
        method="lasso", weights=B, intercept=intercept,
        residual_cov=residual_second_moment(resid, np.ones(n)), n_samples=n,
        converged=all(flags), column_converged=np.array(flags),
    )


def fit_cme(G_zz: np.ndarray, lam0: float) -> np.ndarray:
    """Conditional mean embedding weights B = (G + lam0 I)^-1 G"""
    if lam0 <= 0:
        raise RegressionError(f"conditional mean embedding needs lam0 > 0, got {lam0}")
    G = np.asarray(G_zz, dtype=float)
    try:
        return linalg.cho_solve(linalg.cho_factor(G + lam0 * np.eye(len(G))), G)
    except linalg.LinAlgError as e:
        raise RegressionError(f"Gram matrix is not positive semidefinite: {e}")


def fit_kernel_ridge(X: np.ndarray, Y: np.ndarray, kernel: KernelSpec) -> FittedRegressor:
    from ivpsr.kernelpsr import gram, resolve_bandwidth

    X = np.asarray(X, dtype=float)
    Y = _as_matrix(Y)
    _check_shapes(X, Y)
    bandwidth = resolve_bandwidth(X, kernel)
    G = gram(X, kernel, bandwidth=bandwidth)
    coef = linalg.cho_solve(linalg.cho_factor(G + kernel.lam0 * np.eye(len(X))), Y)
    resid = Y - G @ coef
    return FittedRegressor(
        method="kernel_ridge", weights=coef.T, intercept=np.zeros(Y.shape[1]),
        residual_cov=residual_second_moment(resid, np.ones(len(X))), n_samples=len(X),
        kernel_data={"X": X, "kernel": kernel, "bandwidth": bandwidth},
    )


def fit(X: np.ndarray, Y: np.ndarray, spec: RegressorSpec, weights: Optional[np.ndarray] = None) -> FittedRegressor:
    if spec.method in ("ols", "ridge"):
        return fit_linear(X, Y, spec.lam0, weights=weights)
    if spec.method == "logistic":
        return fit_logistic(X, Y, weights=weights, max_iter=spec.max_iter, tol=spec.tol)
    if weights is not None:
        raise RegressionError(f"{spec.method} does not support row weights")
    if spec.method == "lasso":
        return fit_lasso(X, Y, spec.alpha, max_iter=spec.max_iter, tol=spec.tol)
    return fit_kernel_ridge(X, Y, spec.kernel)


def predict(reg: FittedRegressor, h: np.ndarray) -> np.ndarray:
    """Prediction for one input vector or a matrix of row inputs"""
    h = np.asarray(h, dtype=float)
    single = h.ndim == 1
    H = h[None, :] if single else h
    if H.shape[1] != reg.d_in:
        raise RegressionError(f"input has dimension {H.shape[1]}, regressor expects {reg.d_in}")
    if reg.kernel_data is not None:
        from ivpsr.kernelpsr import cross_gram

        data = reg.kernel_data
        out = cross_gram(H, data["X"], data["kernel"], bandwidth=data["bandwidth"]) @ reg.weights.T
    else:
        out = H @ reg.weights.T + reg.intercept
        if reg.method == "logistic":
            out = expit(out)
    return out[0] if single else out
