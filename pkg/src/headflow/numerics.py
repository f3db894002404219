"""Dense numeric building blocks: softmax, elastic net, OLS, fit metrics."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from headflow.errors import (
    DegenerateRowError,
    InputError,
    SingularSystemError,
    UndefinedMetricError,
)
from headflow.kernels import cd_gram


def row_softmax(m, mask_sentinel_allowed=True):
    """Softmax along the last axis. ``-inf`` cells map to exactly zero."""
    m = np.asarray(m)
    neg_inf = np.isneginf(m)
    if neg_inf.any() and not mask_sentinel_allowed:
        raise DegenerateRowError("masked sentinel present but not allowed")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise DegenerateRowError("non-finite entry in softmax input")
    if neg_inf.all(axis=-1).any():
        raise DegenerateRowError("softmax row has no unmasked entry")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RegressionFit:
    theta: np.ndarray
    intercept: float
    train_r2: Optional[float] = None
    test_r2: Optional[float] = None
    test_pearson: Optional[float] = None
    converged: bool = True
    n_iter: int = 0
    objective: Optional[np.ndarray] = None

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.theta + self.intercept


def _center(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise InputError(f"design {X.shape} and target {y.shape} disagree")
    if X.shape[0] < 2:
        raise InputError("need at least two rows")
    if not np.all(np.isfinite(y)):
        raise InputError("target contains non-finite values")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    return X - x_mean, y - y_mean, x_mean, y_mean


def elastic_net_fit(X, y, alpha=0.0005, l1_ratio=0.5, max_iter=1000, tol=1e-6):
    """Elastic net by cyclic coordinate descent, intercept unpenalized.

    Minimizes ``(1/2M)|y - X theta - b|^2 + alpha*l1_ratio*|theta|_1
    + 0.5*alpha*(1-l1_ratio)*|theta|_2^2``. Columns are not standardized.
    Hitting ``max_iter`` is reported through ``converged=False``.
    """
    if alpha < 0 or not 0.0 <= l1_ratio <= 1.0:
        raise InputError(f"invalid penalty alpha={alpha} l1_ratio={l1_ratio}")
    Xc, yc, x_mean, y_mean = _center(X, y)
    if not np.any(Xc.std(axis=0) > 0):
        raise InputError("design has no varying column")
    M = Xc.shape[0]
    gram = Xc.T @ Xc / M
    cov = Xc.T @ yc / M
    yy = float(yc @ yc) / M
    theta, n_iter, converged, history = cd_gram(
        gram, cov, yy, float(alpha), float(l1_ratio), int(max_iter), float(tol)
    )
    intercept = float(y_mean - x_mean @ theta)
    return RegressionFit(
        theta=np.asarray(theta),
        intercept=intercept,
        converged=bool(converged),
        n_iter=int(n_iter),
        objective=np.asarray(history),
    )


def ols_fit(X, y):
    """Closed-form least squares on centered data; returns ``(theta, intercept)``."""
    Xc, yc, x_mean, y_mean = _center(X, y)
    if np.linalg.matrix_rank(Xc) < Xc.shape[1]:
        raise SingularSystemError("centered design is rank deficient")
    theta = np.linalg.solve(Xc.T @ Xc, Xc.T @ yc)
    return theta, float(y_mean - x_mean @ theta)


def fit_metrics(y_true, y_pred):
    """Return ``(r2, pearson)``. Constant predictions get pearson 0."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size < 2:
        raise InputError("fit_metrics needs two equal-length vectors of size >= 2")
    dt = y_true - y_true.mean()
    ss_tot = float(dt @ dt)
    if ss_tot == 0.0:
        raise UndefinedMetricError("y_true has zero variance")
    res = y_true - y_pred
    r2 = 1.0 - float(res @ res) / ss_tot
    dp = y_pred - y_pred.mean()
    sp = float(dp @ dp)
    if sp == 0.0:
        return r2, 0.0
    pearson = float(dt @ dp) / np.sqrt(ss_tot * sp)
    return r2, float(np.clip(pearson, -1.0, 1.0))
