"""Logistic regression, kernel SVM and random forest behind one contract.

>>> model = fit(X, y, HyperParams(model="LR", C=1.0), seed=0)   # doctest: +SKIP
>>> P = predict_proba(model, X)                                  # doctest: +SKIP
"""
from __future__ import annotations

from .base import (
    KERNELS,
    KINDS,
    Classifier,
    HyperParams,
    ModelError,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from .forest import RandomForest
from .logistic import LogisticRegression, lr_gradient, lr_loss
from .svm import SVM

MODEL_TYPES = {"LR": LogisticRegression, "SVM": SVM, "RF": RandomForest}

TrainedModel = Classifier


def fit(X, y, params: HyperParams, seed: int = 0) -> Classifier:
    """Fit the model family named by ``params.model``; deterministic per seed."""
    return MODEL_TYPES[params.model](params, seed).fit(X, y)


def predict_proba(model: Classifier, X):
    return model.predict_proba(X)


def default_params(model: str) -> HyperParams:
    """Library defaults used for the baseline stage."""
    return {
        "SVM": HyperParams(model="SVM", kernel="rbf", C=1.0),
        "RF": HyperParams(model="RF", n_trees=100, max_depth=None, max_features="sqrt"),
        "LR": HyperParams(model="LR", C=1.0, max_iter=100),
    }[model]


__all__ = [
    "Classifier", "HyperParams", "KERNELS", "KINDS", "LogisticRegression", "MODEL_TYPES",
    "ModelError", "RandomForest", "SVM", "TrainedModel", "default_params", "fit", "load_model",
    "lr_gradient", "lr_loss", "model_from_bytes", "model_to_bytes", "predict_proba", "save_model",
]
