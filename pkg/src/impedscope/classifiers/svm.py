"""Kernel C-SVM trained by SMO with second-order working-set selection.

The dual ``min 1/2 a'Qa - e'a  s.t. 0 <= a <= C, y'a = 0`` is solved on a
precomputed kernel matrix (training sets here have at most a few hundred
rows). Probabilities come from a Platt sigmoid fit on 3-fold internal
decision values; more than two classes are handled one-vs-rest with the
calibrated probabilities renormalised to sum to one.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .base import Classifier

logger = logging.getLogger(__name__)

TAU = 1e-12


def resolve_gamma(gamma, X) -> float:
    if gamma == "scale":
        var = float(np.var(X))
        return 1.0 / (X.shape[1] * var) if var > 0 else 1.0
    return float(gamma)


def kernel_matrix(A, B, kernel: str, gamma: float = 1.0, degree: int = 3, coef0: float = 0.0):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if kernel == "linear":
        return A @ B.T
    if kernel == "poly":
        return (gamma * (A @ B.T) + coef0) ** degree
    if kernel == "rbf":
        sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T))
        return np.exp(-gamma * np.maximum(sq, 0.0))
    if kernel == "sigmoid":
        return np.tanh(gamma * (A @ B.T) + coef0)
    raise ValueError(f"unknown kernel {kernel!r}")


def smo_solve(K, y, C, tol=1e-3, max_iter=100_000):
    """Binary SMO; ``y`` in {-1, +1}. Returns (alpha, rho, converged, n_iter).

    The decision function is ``sum_i alpha_i y_i K(x_i, x) - rho``.
    """
    n = len(y)
    y = y.astype(float)
    Q = (y[:, None] * y[None, :]) * K
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    converged = False
    it = 0
    pos = y > 0
    for it in range(1, max_iter + 1):
        up = np.where(pos, alpha < C, alpha > 0)        # I_up
        low = np.where(pos, alpha > 0, alpha < C)       # I_low
        if not up.any() or not low.any():
            converged = True
            break
        minus_yG = -y * G
        cand = np.where(up, minus_yG, -np.inf)
        i = int(np.argmax(cand))
        g_max = cand[i]
        low_vals = np.where(low, minus_yG, np.inf)
        g_min = low_vals.min()
        if g_max - g_min < tol:
            converged = True
            break
        b = g_max - minus_yG
        a = QD[i] + QD - 2.0 * y[i] * y * Q[i]
        a = np.where(a > 0, a, TAU)
        ok = low & (b > 0)
        obj = np.where(ok, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))
        if not np.isfinite(obj[j]):
            converged = True
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            s = ai + aj
            ni, nj = ai - delta, aj + delta
            if s > C:
                if ni > C:
                    ni, nj = C, s - C
            elif nj < 0:
                nj, ni = 0.0, s
            if s > C:
                if nj > C:
                    nj, ni = C, s - C
            elif ni < 0:
                ni, nj = 0.0, s
        G += Q[i] * (ni - ai) + Q[j] * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    rho = _rho(alpha, y, G, C)
    return alpha, rho, converged, it


def _rho(alpha, y, G, C):
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(np.mean(yG[free]))
    pos = y > 0
    ub_mask = np.where(pos, alpha >= C, alpha <= 0)
    lb_mask = np.where(pos, alpha <= 0, alpha >= C)
    ub = yG[ub_mask].min() if ub_mask.any() else math.inf
    lb = yG[lb_mask].max() if lb_mask.any() else -math.inf
    if math.isinf(ub) or math.isinf(lb):
        return float(ub if math.isfinite(ub) else lb if math.isfinite(lb) else 0.0)
    return float((ub + lb) / 2.0)


def platt_fit(f, t, max_iter: int = 100):
    """Sigmoid ``P(y=1|f) = 1 / (1 + exp(A f + B))`` by regularised Newton.

    ``t`` in {0, 1}. Follows the Lin-Lin-Weng formulation with smoothed
    targets and a backtracking line search.
    """
    f = np.asarray(f, dtype=float)
    t = np.asarray(t)
    prior1 = float(np.sum(t == 1))
    prior0 = float(len(t) - prior1)
    hi = (prior1 + 1.0) / (prior1 + 2.0)
    lo = 1.0 / (prior0 + 2.0)
    T = np.where(t == 1, hi, lo)
    A, B = 0.0, math.log((prior0 + 1.0) / (prior1 + 1.0))
    min_step, sigma, eps = 1e-10, 1e-12, 1e-5

    def objective(A, B):
        fApB = f * A + B
        return float(np.sum(np.where(fApB >= 0, T * fApB + np.log1p(np.exp(-np.abs(fApB))),
                                     (T - 1.0) * fApB + np.log1p(np.exp(-np.abs(fApB))))))

    fval = objective(A, B)
    for _ in range(max_iter):
        fApB = f * A + B
        e = np.exp(-np.abs(fApB))
        p = np.where(fApB >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = T - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            break
    return A, B


def platt_predict(f, A, B):
    fApB = np.asarray(f, dtype=float) * A + B
    e = np.exp(-np.abs(fApB))
    return np.where(fApB >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


class _BinarySVM:
    """One binary machine plus its Platt calibrator."""

    def __init__(self, kernel, C, gamma, degree, coef0, tol, max_iter):
        self.kernel, self.C, self.gamma = kernel, C, gamma
        self.degree, self.coef0, self.tol, self.max_iter = degree, coef0, tol, max_iter

    def _K(self, A, B):
        return kernel_matrix(A, B, self.kernel, self.gamma, self.degree, self.coef0)

    def train(self, X, ypm, K=None):
        K = self._K(X, X) if K is None else K
        alpha, rho, conv, nit = smo_solve(K, ypm, self.C, self.tol, self.max_iter)
        sv = alpha > 0
        self.sv_ = X[sv]
        self.coef_ = alpha[sv] * ypm[sv]
        self.rho_ = rho
        self.converged = conv
        self.n_iter = nit
        return self

    def decision(self, X):
        if self.sv_.shape[0] == 0:
            return np.full(X.shape[0], -self.rho_)
        return self._K(X, self.sv_) @ self.coef_ - self.rho_


def _internal_folds(t, n_folds, rng):
    """Class-stratified fold ids for the calibration split."""
    folds = np.empty(len(t), dtype=np.int64)
    for c in (0, 1):
        idx = np.flatnonzero(t == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


class SVM(Classifier):
    kind = "SVM"
    CALIBRATION_FOLDS = 3

    def _machine(self):
        p = self.params
        return _BinarySVM(p.kernel, p.C, self.gamma_, p.degree, p.coef0, p.svm_tol, p.svm_max_iter)

    def _fit(self, X, y):
        self.gamma_ = resolve_gamma(self.params.gamma, X)
        k = len(self.classes_)
        K = self._machine()._K(X, X)
        targets = [(y == 1).astype(int)] if k == 2 else [(y == c).astype(int) for c in range(k)]
        rng = np.random.default_rng(self.seed)
        self.machines_, self.platt_ = [], []
        conv = True
        for t in targets:
            m = self._machine().train(X, np.where(t == 1, 1.0, -1.0), K)
            conv &= m.converged
            f = self._cv_decisions(X, K, t, rng)
            self.machines_.append(m)
            self.platt_.append(platt_fit(f, t))
        self.converged = bool(conv)
        if not conv:
            logger.warning("SMO hit the iteration budget before convergence")

    def _cv_decisions(self, X, K, t, rng):
        folds = _internal_folds(t, self.CALIBRATION_FOLDS, rng)
        f = np.zeros(len(t))
        for k in range(self.CALIBRATION_FOLDS):
            te = folds == k
            tr = ~te
            if not te.any():
                continue
            tt = t[tr]
            if tt.min() == tt.max():
                # one class left in the training part: constant decision
                f[te] = 1.0 if tt[0] == 1 else -1.0
                continue
            m = self._machine().train(X[tr], np.where(tt == 1, 1.0, -1.0), K[np.ix_(tr, tr)])
            f[te] = m.decision(X[te])
        return f

    def decision_function(self, X):
        X = self._check_predict(X)
        D = np.column_stack([m.decision(X) for m in self.machines_])
        return D[:, 0] if D.shape[1] == 1 else D

    def _proba(self, X):
        D = [m.decision(X) for m in self.machines_]
        P = np.column_stack([platt_predict(d, A, B) for d, (A, B) in zip(D, self.platt_)])
        if P.shape[1] == 1:
            return np.column_stack([1.0 - P[:, 0], P[:, 0]])
        return P

    def _state(self):
        meta = {"gamma_": self.gamma_, "platt": [list(ab) for ab in self.platt_],
                "rho": [m.rho_ for m in self.machines_]}
        arrays = {}
        for i, m in enumerate(self.machines_):
            arrays[f"sv{i:03d}"] = m.sv_
            arrays[f"coef{i:03d}"] = m.coef_
        return meta, arrays

    def _load_state(self, meta, arrays):
        self.gamma_ = meta["gamma_"]
        self.platt_ = [tuple(ab) for ab in meta["platt"]]
        self.machines_ = []
        for i, rho in enumerate(meta["rho"]):
            m = self._machine()
            m.sv_ = arrays[f"sv{i:03d}"].reshape(-1, self.n_features_)
            m.coef_ = arrays[f"coef{i:03d}"]
            m.rho_ = rho
            m.converged = self.converged
            self.machines_.append(m)
