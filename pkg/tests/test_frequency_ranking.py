import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impedscope.frequency_ranking import (
    FrequencyRanking,
    aggregate_rankings,
    borda_points,
    flattened_covariance_importance,
    frequency_importance,
    importance_from_covariance,
    observation_covariance,
    pca_frequency_importance,
    rank,
    rank_folds,
    select_top_frequencies,
)


def _dense_oracle(X, k=10):
    """Top-k loadings from a general (non-symmetric) eigen-solver."""
    C = np.cov(X, rowvar=False)
    w, V = np.linalg.eig(C)
    w, V = w.real, V.real
    order = np.argsort(w)[::-1][:k]
    V = V[:, order] / np.linalg.norm(V[:, order], axis=0)
    return np.sum(V ** 2, axis=1)


@pytest.mark.parametrize("seed", range(20))
def test_pca_scores_match_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    # correlated columns with a well separated spectrum
    X = rng.standard_normal((50, 31)) @ np.diag(np.linspace(3, 0.2, 31)) @ _rotation(rng, 31)
    imp = pca_frequency_importance(X)
    assert imp.n_components == 10
    assert abs(imp.scores.sum() - imp.n_components) <= 1e-9
    np.testing.assert_allclose(imp.scores, _dense_oracle(X), atol=1e-8)


def _rotation(rng, n):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q


def test_pca_matches_sklearn():
    sklearn = pytest.importorskip("sklearn.decomposition")
    rng = np.random.default_rng(3)
    X = rng.standard_normal((60, 31)) @ _rotation(rng, 31) * np.linspace(1, 4, 31)
    ref = sklearn.PCA(n_components=10, svd_solver="full").fit(X)
    np.testing.assert_allclose(pca_frequency_importance(X).scores,
                               np.sum(ref.components_ ** 2, axis=0), atol=1e-8)


def test_rank_deficient_covariance():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 4)) @ rng.standard_normal((4, 31))   # rank 4
    imp = pca_frequency_importance(X)
    assert imp.n_components == 4 and imp.rank_deficient
    assert imp.scores.sum() == pytest.approx(4, abs=1e-9)


def test_zero_covariance():
    imp = importance_from_covariance(np.zeros((5, 5)))
    assert imp.n_components == 0 and np.all(imp.scores == 0)


@pytest.mark.parametrize("X", [np.zeros(5), np.zeros((5, 3)), np.full((20, 3), np.nan)])
def test_pca_input_validation(X):
    with pytest.raises(ValueError):
        pca_frequency_importance(X)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_score_sum_equals_components(seed, k):
    X = np.random.default_rng(seed).standard_normal((30, 12))
    imp = pca_frequency_importance(X, n_components=k)
    assert imp.n_components == k
    assert abs(imp.scores.sum() - k) < 1e-9
    assert np.all((imp.scores >= -1e-12) & (imp.scores <= 1 + 1e-12))


# -- observation covariance -------------------------------------------------

def test_observation_covariance_is_correlation(rng):
    zmag = rng.lognormal(5, 0.3, size=(4, 20, 6))
    valid = rng.random((4, 20)) < 0.8
    cov, count = observation_covariance(zmag, valid)
    rows = np.concatenate([zmag[i][valid[i]] for i in range(4)])
    assert count == rows.shape[0]
    Z = (rows - rows.mean(0)) / rows.std(0)
    np.testing.assert_allclose(cov, Z.T @ Z / (count - 1), atol=1e-12)


def test_importance_uses_training_rows_only(rng):
    zmag = rng.lognormal(5, 0.3, size=(6, 20, 12))
    valid = np.ones((6, 20), bool)
    a = frequency_importance(zmag, valid, train_idx=[0, 1, 2])
    zmag2 = zmag.copy()
    zmag2[3:] *= rng.lognormal(0, 1, size=(3, 20, 12))
    b = frequency_importance(zmag2, valid, train_idx=[0, 1, 2])
    np.testing.assert_array_equal(a.scores, b.scores)


def test_flattened_mode_sums_to_components(rng):
    zmag = rng.lognormal(5, 0.3, size=(15, 8, 6))
    valid = np.ones((15, 8), bool)
    imp = flattened_covariance_importance(zmag, valid, n_components=4)
    assert imp.scores.shape == (6,)
    assert imp.scores.sum() == pytest.approx(imp.n_components, abs=1e-9)
    with pytest.raises(ValueError):
        frequency_importance(zmag, valid, observation="nope")


# -- ranking and Borda aggregation -----------------------------------------

def test_rank_ties_keep_lower_index():
    assert rank([0.1, 0.5, 0.5, 0.2]) == [1, 2, 3, 0]


def test_borda_points_known():
    pts = borda_points([[0, 1, 2], [1, 0, 2], [1, 2, 0]])
    np.testing.assert_array_equal(pts, [3 + 2 + 1, 2 + 3 + 3, 1 + 1 + 2])
    assert aggregate_rankings([[0, 1, 2], [1, 0, 2], [1, 2, 0]]) == [1, 0, 2]


def test_borda_tie_break():
    assert aggregate_rankings([[0, 1], [1, 0]]) == [0, 1]


@pytest.mark.parametrize("bad", [[], [[0, 1], [0]], [[0, 0]]])
def test_borda_validation(bad):
    with pytest.raises(ValueError):
        borda_points(bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 31).flatmap(
    lambda n: st.lists(st.permutations(list(range(n))), min_size=1, max_size=6)))
def test_borda_properties(rankings):
    n = len(rankings[0])
    pts = borda_points(rankings)
    assert pts.sum() == len(rankings) * n * (n + 1) // 2
    comp = aggregate_rankings(rankings)
    assert sorted(comp) == list(range(n))
    if all(r == rankings[0] for r in rankings):
        assert comp == list(rankings[0])


def test_select_top():
    assert select_top_frequencies([12, 0, 30, 4], 3) == [0, 12, 30]
    fr = FrequencyRanking([[2, 1, 0], [2, 0, 1]], [np.zeros(3)] * 2)
    assert fr.composite == [2, 0, 1]
    assert select_top_frequencies(fr, 1) == [2]
    for bad in (0, 5):
        with pytest.raises(ValueError):
            select_top_frequencies([0, 1, 2, 3], bad)


def test_rank_folds_and_report(rng):
    zmag = rng.lognormal(5, 0.3, size=(10, 30, 12))
    valid = np.ones((10, 30), bool)
    folds = [np.arange(0, 8), np.arange(2, 10)]
    fr = rank_folds(zmag, valid, folds, provenance=[{"fold": 1}, {"fold": 2}])
    assert len(fr.per_fold) == 2 and len(fr.composite) == 12
    d = fr.to_dict(grid=list(range(100, 1300, 100)))
    assert min(d["composite"]) == 1 and max(d["composite"]) == 12
    assert d["folds"][1]["fold"] == 2
    assert d["composite_hz"][0] == (d["composite"][0]) * 100
