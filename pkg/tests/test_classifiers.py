import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impedscope.classifiers import (
    HyperParams,
    ModelError,
    default_params,
    fit,
    load_model,
    lr_gradient,
    lr_loss,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from impedscope.classifiers.base import MAGIC
from impedscope.classifiers.forest import DecisionTree, best_split, n_split_features
from impedscope.classifiers.svm import kernel_matrix, platt_fit, platt_predict, resolve_gamma, smo_solve


def _blobs(rng, n=60, d=5, k=2, sep=2.0):
    y = np.arange(n) % k
    centres = rng.standard_normal((k, d)) * sep
    return centres[y] + rng.standard_normal((n, d)), y


# -- logistic regression ----------------------------------------------------

def _central_diff(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(50))
def test_lr_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 8))
    y = rng.integers(0, 2, 20)
    C = float(10 ** rng.uniform(-2, 2))
    p = rng.standard_normal(9)
    g = lr_gradient(p, X, y, C)
    fd = _central_diff(lambda q: lr_loss(q, X, y, C), p)
    assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


@pytest.mark.parametrize("seed", range(5))
def test_lr_multiclass_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    X = rng.standard_normal((20, 6))
    y = rng.integers(0, 3, 20)
    p = rng.standard_normal(7 * 3)
    fd = _central_diff(lambda q: lr_loss(q, X, y, 0.5, 3), p)
    np.testing.assert_allclose(lr_gradient(p, X, y, 0.5, 3), fd, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("C", [0.01, 1.0, 100.0])
def test_lr_matches_sklearn(C):
    lm = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(7)
    X, y = _blobs(rng, sep=0.5)
    ours = fit(X, y, HyperParams(model="LR", C=C, max_iter=1000, tol=1e-10))
    ref = lm.LogisticRegression(C=C, tol=1e-10, max_iter=5000).fit(X, y)
    np.testing.assert_allclose(ours.coef_, ref.coef_[0], rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(ours.predict_proba(X), ref.predict_proba(X), atol=1e-5)


def test_lr_loss_history_decreases(rng):
    X, y = _blobs(rng)
    m = fit(X, y, HyperParams(model="LR", C=1.0, max_iter=50))
    h = np.asarray(m.loss_history_)
    assert np.all(np.diff(h) <= 1e-9 * np.abs(h[:-1]))


def test_lr_multiclass_probabilities(rng):
    X, y = _blobs(rng, k=3, sep=3.0)
    m = fit(X, y, HyperParams(model="LR", C=1.0, max_iter=500))
    P = m.predict_proba(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert np.mean(m.predict(X) == y) > 0.9


# -- SVM --------------------------------------------------------------------

@pytest.mark.parametrize("kernel, C", [("linear", 0.1), ("rbf", 1.0), ("rbf", 100.0), ("poly", 1.0)])
def test_svm_decision_matches_sklearn(kernel, C):
    svm = pytest.importorskip("sklearn.svm")
    rng = np.random.default_rng(11)
    X, y = _blobs(rng, n=50, d=4, sep=0.8)
    hp = HyperParams(model="SVM", kernel=kernel, C=C, gamma=0.25, svm_tol=1e-6)
    ours = fit(X, y, hp)
    ref = svm.SVC(kernel=kernel, C=C, gamma=0.25, degree=3, coef0=0.0, tol=1e-6).fit(X, y)
    Xt = rng.standard_normal((30, 4))
    np.testing.assert_allclose(ours.decision_function(Xt), ref.decision_function(Xt),
                               atol=1e-3 * max(1.0, C))


def test_smo_kkt(rng):
    X, y = _blobs(rng, n=40, d=3, sep=1.0)
    ypm = np.where(y == 1, 1.0, -1.0)
    K = kernel_matrix(X, X, "rbf", 0.5)
    C = 2.0
    alpha, rho, conv, _ = smo_solve(K, ypm, C, tol=1e-8)
    assert conv
    assert abs(alpha @ ypm) < 1e-10
    assert np.all((alpha >= 0) & (alpha <= C))
    f = K @ (alpha * ypm) - rho
    m = ypm * f
    assert np.all(m[alpha == 0] >= 1 - 1e-6)
    assert np.all(m[alpha >= C] <= 1 + 1e-6)
    free = (alpha > 1e-9) & (alpha < C - 1e-9)
    np.testing.assert_allclose(m[free], 1.0, atol=1e-6)


def test_gamma_scale():
    X = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert resolve_gamma("scale", X) == pytest.approx(1 / (2 * 1.0))
    assert resolve_gamma(0.3, X) == 0.3
    assert resolve_gamma("scale", np.ones((3, 2))) == 1.0


def test_kernel_matrix_unknown():
    with pytest.raises(ValueError):
        kernel_matrix(np.ones((2, 2)), np.ones((2, 2)), "laplace")


def test_platt_monotone_and_calibrated():
    rng = np.random.default_rng(0)
    f = rng.standard_normal(400) * 2
    t = (rng.random(400) < 1 / (1 + np.exp(-2 * f))).astype(int)
    A, B = platt_fit(f, t)
    assert A < 0                                   # larger decision -> higher P(1)
    assert A == pytest.approx(-2, rel=0.3)
    p = platt_predict(np.array([-50.0, 0.0, 50.0]), A, B)
    assert p[0] < p[1] < p[2] and np.all(np.isfinite(p))


def test_svm_multiclass(rng):
    X, y = _blobs(rng, n=60, k=3, sep=3.0)
    m = fit(X, y, HyperParams(model="SVM", kernel="rbf", C=1.0))
    P = m.predict_proba(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert m.decision_function(X).shape == (60, 3)
    assert np.mean(m.predict(X) == y) > 0.9


# -- random forest ----------------------------------------------------------

@pytest.mark.parametrize("mf, d, k", [("sqrt", 16, 4), ("sqrt", 2, 1), (0.5, 10, 5), (3, 10, 3),
                                      (1.0, 7, 7), (20, 7, 7)])
def test_n_split_features(mf, d, k):
    assert n_split_features(mf, d) == k


def test_best_split_known():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 1.0], [4.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    gain, f, thr = best_split(X, y, np.ones(4), 2, np.array([0, 1]))
    assert (f, thr) == (0, 2.5)        # both columns split perfectly; lowest index wins
    assert gain == pytest.approx(0.5)
    assert best_split(np.ones((3, 1)), np.array([0, 1, 0]), np.ones(3), 2, np.array([0])) is None


def test_tree_matches_sklearn_structure():
    tree = pytest.importorskip("sklearn.tree")
    rng = np.random.default_rng(2)
    X, y = _blobs(rng, n=80, d=4, sep=1.0)
    ours = DecisionTree(max_features=1.0).fit(X, y, np.ones(80), 2, rng)
    ref = tree.DecisionTreeClassifier(random_state=0).fit(X, y)
    assert ours.feature_[0] == ref.tree_.feature[0]
    assert ours.threshold_[0] == pytest.approx(ref.tree_.threshold[0], rel=1e-6)
    Xt = rng.standard_normal((500, 4)) * 2
    assert np.mean(ours.vote(Xt) == ref.predict(Xt)) > 0.95
    np.testing.assert_array_equal(ours.vote(X), y)


def test_tree_depth_limit(rng):
    X, y = _blobs(rng, n=80, d=4, sep=0.3)
    t = DecisionTree(max_depth=2, max_features=1.0).fit(X, y, np.ones(80), 2, rng)
    assert t.depth <= 2


def test_forest_votes_and_oob(rng):
    X, y = _blobs(rng, n=60, d=6, sep=2.0)
    m = fit(X, y, HyperParams(model="RF", n_trees=25), seed=3)
    P = m.predict_proba(X)
    votes = m.tree_votes(X)
    np.testing.assert_allclose(P[:, 1], np.mean(votes == 1, axis=0))
    assert 0.8 < m.oob_score_ <= 1.0
    assert m.inbag_.sum(axis=1).tolist() == [60] * 25


# -- shared contract --------------------------------------------------------

MODELS = [
    HyperParams(model="LR", C=0.5),
    HyperParams(model="SVM", kernel="rbf", C=1.0),
    HyperParams(model="SVM", kernel="sigmoid", C=1.0, gamma=0.1),
    HyperParams(model="RF", n_trees=10, max_depth=4, max_features=0.5),
]


@pytest.mark.parametrize("hp", MODELS, ids=lambda h: h.label())
def test_serialisation_roundtrip(tmp_path, hp):
    rng = np.random.default_rng(0)
    X, y = _blobs(rng, n=40, d=5, k=3)
    m = fit(X, y, hp, seed=9)
    blob = model_to_bytes(m)
    assert blob[:8] == MAGIC
    path = tmp_path / "m.imsm"
    save_model(m, path)
    back = load_model(path)
    np.testing.assert_array_equal(back.predict_proba(X), m.predict_proba(X))
    assert model_to_bytes(back) == blob
    assert model_from_bytes(blob).params == hp


@pytest.mark.parametrize("hp", MODELS, ids=lambda h: h.label())
def test_deterministic_per_seed(hp):
    rng = np.random.default_rng(1)
    X, y = _blobs(rng, n=40, d=5)
    a = model_to_bytes(fit(X, y, hp, seed=4))
    b = model_to_bytes(fit(X, y, hp, seed=4))
    assert a == b


@pytest.mark.parametrize("hp", MODELS, ids=lambda h: h.label())
def test_probabilities_valid(hp):
    rng = np.random.default_rng(2)
    X, y = _blobs(rng, n=40, d=5)
    P = fit(X, y, hp).predict_proba(rng.standard_normal((15, 5)) * 10)
    assert P.shape == (15, 2)
    assert np.all((P >= 0) & (P <= 1))
    np.testing.assert_allclose(P.sum(axis=1), 1.0)


def test_string_labels_preserved(rng):
    X, y = _blobs(rng, n=30)
    labels = np.array(["a", "b"])[y]
    m = fit(X, labels, HyperParams(model="LR"))
    assert set(m.predict(X)) <= {"a", "b"}


@pytest.mark.parametrize("blob, msg", [(b"NOTAMODEL" + bytes(20), "magic")])
def test_bad_model_bytes(blob, msg):
    with pytest.raises(ModelError, match=msg):
        model_from_bytes(blob)


def test_trailing_bytes_rejected(rng):
    X, y = _blobs(rng, n=20)
    blob = model_to_bytes(fit(X, y, HyperParams(model="LR")))
    with pytest.raises(ModelError, match="trailing"):
        model_from_bytes(blob + b"\0")


@pytest.mark.parametrize("X, y", [
    (np.ones(4), np.array([0, 1, 0, 1])),
    (np.ones((4, 2)), np.array([0, 0, 0, 0])),
    (np.array([[np.nan, 1], [0, 1]]), np.array([0, 1])),
    (np.ones((4, 2)), np.array([0, 1, 0])),
])
def test_input_validation(X, y):
    with pytest.raises(ModelError):
        fit(X, y, HyperParams(model="LR"))


def test_predict_checks(rng):
    X, y = _blobs(rng, n=20)
    m = fit(X, y, HyperParams(model="LR"))
    with pytest.raises(ModelError):
        m.predict_proba(X[:, :3])


@pytest.mark.parametrize("kw", [dict(model="KNN"), dict(kernel="cubic"), dict(C=0.0), dict(C=np.inf),
                                dict(n_trees=0), dict(max_depth=0), dict(max_features="log2"),
                                dict(max_features=1.5), dict(gamma="auto"), dict(gamma=-1.0)])
def test_hyperparam_validation(kw):
    with pytest.raises(ModelError):
        HyperParams(**kw)


def test_hyperparam_dict_roundtrip():
    hp = HyperParams(model="RF", n_trees=50, max_features=0.5, max_depth=10)
    assert HyperParams.from_dict(hp.to_dict()) == hp
    assert HyperParams.from_dict({"model": "RF", "max_features": 3}).max_features == 3
    with pytest.raises(ModelError):
        HyperParams.from_dict({"model": "LR", "bogus": 1})
    assert default_params("SVM").relevant() == {"model": "SVM", "kernel": "rbf", "C": 1.0}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["LR", "RF"]))
def test_separable_data_is_learned(seed, kind):
    rng = np.random.default_rng(seed)
    X, y = _blobs(rng, n=30, d=3, sep=0.0)
    X[:, 0] += np.where(y == 1, 10.0, -10.0)
    hp = HyperParams(model=kind, n_trees=5)
    assert np.all(fit(X, y, hp, seed=seed).predict(X) == y)
