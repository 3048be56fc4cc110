"""L2-regularised logistic regression (sigmoid for two classes, softmax otherwise).

Objective, with ``C`` the inverse regularisation strength::

    L(w, b) = sum_i NLL_i(w, b) + ||w||^2 / (2 C)

The intercept is not penalised, so the penalty gradient is ``w / C``.
Minimised with L-BFGS-B using the analytic gradient below.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp

from .base import Classifier


def _split(params, d, k):
    if k == 2:
        return params[:d], params[d]
    W = params[: d * k].reshape(d, k)
    return W, params[d * k:]


def lr_loss(params, X, y, C, n_classes: int = 2) -> float:
    """Regularised negative log-likelihood; ``y`` holds class indices."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    w, b = _split(np.asarray(params, dtype=float), d, n_classes)
    if n_classes == 2:
        z = X @ w + b
        nll = -np.sum(np.where(y == 1, log_expit(z), log_expit(-z)))
    else:
        Z = X @ w + b
        nll = np.sum(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y])
    return float(nll + np.sum(w * w) / (2.0 * C))


def lr_gradient(params, X, y, C, n_classes: int = 2) -> np.ndarray:
    """Gradient of ``lr_loss`` with respect to the flat parameter vector.

    Layout: binary ``[w (d), b]``; multiclass ``[W (d*k row-major), b (k)]``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    d = X.shape[1]
    w, b = _split(np.asarray(params, dtype=float), d, n_classes)
    if n_classes == 2:
        r = expit(X @ w + b) - (y == 1)
        return np.concatenate([X.T @ r + w / C, [r.sum()]])
    Z = X @ w + b
    P = np.exp(Z - logsumexp(Z, axis=1, keepdims=True))
    P[np.arange(len(y)), y] -= 1.0
    return np.concatenate([(X.T @ P + w / C).ravel(), P.sum(axis=0)])


class LogisticRegression(Classifier):
    kind = "LR"

    def _fit(self, X, y):
        k = len(self.classes_)
        d = X.shape[1]
        C = self.params.C
        x0 = np.zeros(d + 1 if k == 2 else (d + 1) * k)
        self.loss_history_ = [lr_loss(x0, X, y, C, k)]

        last = {}

        def fun(p):
            last["p"], last["f"] = p.copy(), lr_loss(p, X, y, C, k)
            return last["f"], lr_gradient(p, X, y, C, k)

        def record(p):
            # the accepted iterate is normally the last point evaluated
            same = "p" in last and np.array_equal(p, last["p"])
            self.loss_history_.append(last["f"] if same else lr_loss(p, X, y, C, k))

        res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=record,
                       options={"maxiter": self.params.max_iter, "gtol": self.params.tol,
                                "ftol": 1e-15, "maxcor": 10})
        self.converged = bool(res.success)
        self.n_iter_ = int(res.nit)
        self.coef_, self.intercept_ = _split(res.x, d, k)

    def decision_function(self, X):
        X = self._check_predict(X)
        return X @ self.coef_ + self.intercept_

    def _proba(self, X):
        z = X @ self.coef_ + self.intercept_
        if z.ndim == 1:
            p = expit(z)
            return np.column_stack([1.0 - p, p])
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))

    def _state(self):
        return {}, {"coef": np.asarray(self.coef_), "intercept": np.atleast_1d(self.intercept_)}

    def _load_state(self, meta, arrays):
        self.coef_ = arrays["coef"]
        b = arrays["intercept"]
        self.intercept_ = b[0] if self.coef_.ndim == 1 else b
