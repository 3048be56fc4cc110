"""PCA-based frequency importance, per-fold ranking and Borda aggregation.

Importance of frequency ``f`` is the sum of its squared loadings over the
leading principal directions (10 by default). Principal directions come from
a symmetric eigendecomposition of the small ``N_freq x N_freq`` covariance
matrix, never from an SVD of the (very tall) observation matrix.

Indices are 0-based internally; ``FrequencyRanking.to_dict`` reports 1-based.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_COMPONENTS = 10
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class PCAImportance:
    scores: np.ndarray
    n_components: int
    explained_fraction: float
    eigenvalues: np.ndarray
    rank_deficient: bool = False


def importance_from_covariance(cov: np.ndarray, n_components: int = N_COMPONENTS) -> PCAImportance:
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = max(evals[0], 0.0) if evals.size else 0.0
    rank = int(np.sum(evals > _RANK_TOL * top)) if top > 0 else 0
    k = min(n_components, rank)
    deficient = k < n_components
    if deficient:
        logger.info("covariance rank %d < %d components; using %d", rank, n_components, k)
    loadings = evecs[:, :k]
    scores = np.sum(loadings ** 2, axis=1)
    total = float(np.sum(np.clip(evals, 0, None)))
    explained = float(np.sum(evals[:k]) / total) if total > 0 else 0.0
    return PCAImportance(scores, k, explained, evals, deficient)


def pca_frequency_importance(observations: np.ndarray, n_components: int = N_COMPONENTS) -> PCAImportance:
    """Importance scores from an (observations x frequencies) matrix.

    Columns are centred; loadings are the unit-norm eigenvectors of the
    column covariance. Requires more observations than components.
    """
    X = np.asarray(observations, dtype=float)
    if X.ndim != 2:
        raise ValueError("observations must be 2-D")
    if X.shape[0] < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} observations, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations must be finite")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    return importance_from_covariance(cov, n_components)


def observation_covariance(zmag: np.ndarray, valid: np.ndarray, patterns=None,
                           standardize: bool = True) -> tuple[np.ndarray, int]:
    """Covariance of the (sample, valid pattern) spectral observations.

    Each observation is one pattern's spectrum in one sample. With
    ``standardize`` every frequency is z-scored first (pooled over all
    observations), so the result is the correlation-type matrix of the
    z-scored spectra. Two passes, streaming over samples.
    """
    n, P, F = zmag.shape
    pidx = np.arange(P) if patterns is None else np.asarray(patterns, dtype=np.int64)
    total = np.zeros(F)
    count = 0
    for i in range(n):
        rows = zmag[i, pidx][valid[i, pidx]]
        rows = rows[np.all(np.isfinite(rows), axis=1)]
        total += rows.sum(axis=0)
        count += rows.shape[0]
    if count < 2:
        raise ValueError("fewer than two valid spectral observations")
    mean = total / count
    cross = np.zeros((F, F))
    for i in range(n):
        rows = zmag[i, pidx][valid[i, pidx]]
        rows = rows[np.all(np.isfinite(rows), axis=1)] - mean
        cross += rows.T @ rows
    cov = cross / (count - 1)
    if standardize:
        # population std, consistent with the feature z-score
        sd = np.sqrt(np.diag(cross) / count)
        ok = sd >= 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, sd, 1.0), 0.0)
        cov = cov * inv[:, None] * inv[None, :]
    return cov, count


def flattened_covariance_importance(zmag: np.ndarray, valid: np.ndarray, patterns=None,
                                    n_components: int = N_COMPONENTS) -> PCAImportance:
    """Alternative reading: one observation per sample (all patterns x freqs).

    Works in the sample Gram space (n x n); a frequency's score is the sum of
    squared loadings of all columns measured at that frequency.
    """
    n, P, F = zmag.shape
    pidx = np.arange(P) if patterns is None else np.asarray(patterns, dtype=np.int64)
    X = zmag[:, pidx].reshape(n, -1)
    col_f = np.tile(np.arange(F), pidx.size)
    X = np.where(np.isfinite(X), X, np.nan)
    mu = np.nanmean(X, axis=0)
    X = np.where(np.isfinite(X), X - mu, 0.0)
    X = np.nan_to_num(X)
    sd = np.sqrt(np.bincount(col_f, weights=(X ** 2).sum(axis=0), minlength=F) / (n * pidx.size))
    sd = np.where(sd < 1e-12, np.inf, sd)
    X = X / sd[col_f]
    G = X @ X.T
    evals, evecs = np.linalg.eigh(0.5 * (G + G.T))
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = max(evals[0], 0.0)
    rank = int(np.sum(evals > _RANK_TOL * top)) if top > 0 else 0
    k = min(n_components, rank)
    # right singular vectors: v_j = X^T u_j / sqrt(lambda_j)
    V = (X.T @ evecs[:, :k]) / np.sqrt(evals[:k])
    scores = np.bincount(col_f, weights=(V ** 2).sum(axis=1), minlength=F)
    total = float(np.sum(np.clip(evals, 0, None)))
    explained = float(np.sum(evals[:k]) / total) if total > 0 else 0.0
    return PCAImportance(scores, k, explained, evals / max(n - 1, 1), k < n_components)


def frequency_importance(zmag, valid, train_idx=None, patterns=None, observation: str = "pattern_rows",
                         n_components: int = N_COMPONENTS) -> PCAImportance:
    """Importance scores from the training samples only."""
    if train_idx is not None:
        zmag, valid = zmag[train_idx], valid[train_idx]
    if observation == "pattern_rows":
        cov, count = observation_covariance(zmag, valid, patterns)
        if count < n_components + 1:
            raise ValueError(f"need at least {n_components + 1} observations, got {count}")
        return importance_from_covariance(cov, n_components)
    if observation == "flattened":
        return flattened_covariance_importance(zmag, valid, patterns, n_components)
    raise ValueError(f"unknown observation mode {observation!r}")


def rank(scores: Sequence[float]) -> list[int]:
    """0-based indices by descending score; equal scores keep the lower index first."""
    s = np.asarray(scores, dtype=float)
    return [int(i) for i in np.lexsort((np.arange(s.size), -s))]


def borda_points(rankings: Sequence[Sequence[int]]) -> np.ndarray:
    rankings = [list(r) for r in rankings]
    if not rankings:
        raise ValueError("need at least one ranking")
    n = len(rankings[0])
    if any(len(r) != n for r in rankings):
        raise ValueError("rankings have different lengths")
    points = np.zeros(n, dtype=np.int64)
    for r in rankings:
        if sorted(r) != list(range(n)):
            raise ValueError("each ranking must be a permutation of 0..N-1")
        # position p (0-based) is rank p+1 and earns n - p points
        points[np.asarray(r)] += n - np.arange(n)
    return points


def aggregate_rankings(rankings: Sequence[Sequence[int]]) -> list[int]:
    """Borda composite: most points first, ties to the lower frequency index."""
    return rank(borda_points(rankings))


def select_top_frequencies(ranking, f_T: int) -> list[int]:
    """First ``f_T`` entries of a ranking, returned in ascending index order."""
    order = ranking.composite if isinstance(ranking, FrequencyRanking) else list(ranking)
    if not 1 <= f_T <= len(order):
        raise ValueError(f"f_T={f_T} outside 1..{len(order)}")
    return sorted(order[:f_T])


@dataclass
class FrequencyRanking:
    per_fold: list[list[int]]
    per_fold_scores: list[np.ndarray]
    composite: list[int] = field(default_factory=list)
    points: np.ndarray | None = None
    explained: list[float] = field(default_factory=list)
    n_components: list[int] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.per_fold and not self.composite:
            self.points = borda_points(self.per_fold)
            self.composite = rank(self.points)

    def to_dict(self, grid=None) -> dict:
        out = {
            "composite": [i + 1 for i in self.composite],
            "points": [int(p) for p in self.points] if self.points is not None else None,
            "folds": [
                {
                    "ranking": [i + 1 for i in r],
                    "scores": [float(x) for x in s],
                    "explained_variance": float(self.explained[k]) if k < len(self.explained) else None,
                    "n_components": int(self.n_components[k]) if k < len(self.n_components) else None,
                    **(self.provenance[k] if k < len(self.provenance) else {}),
                }
                for k, (r, s) in enumerate(zip(self.per_fold, self.per_fold_scores))
            ],
        }
        if grid is not None:
            out["composite_hz"] = [grid[i] for i in self.composite]
        return out


def rank_folds(zmag, valid, fold_train_indices, patterns=None, observation: str = "pattern_rows",
               n_components: int = N_COMPONENTS, provenance=None) -> FrequencyRanking:
    per_fold, scores, expl, ncomp = [], [], [], []
    for tr in fold_train_indices:
        imp = frequency_importance(zmag, valid, tr, patterns, observation, n_components)
        per_fold.append(rank(imp.scores))
        scores.append(imp.scores)
        expl.append(imp.explained_fraction)
        ncomp.append(imp.n_components)
    return FrequencyRanking(per_fold, scores, explained=expl, n_components=ncomp,
                            provenance=list(provenance or []))
