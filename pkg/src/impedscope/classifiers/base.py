"""Shared pieces for the classifier families: hyperparameters, input checks
and the versioned binary model format.

Binary layout (all integers little-endian)::

    8 bytes  magic  b"IMPSCMDL"
    uint16   format version
    uint8    kind code (1 = LR, 2 = SVM, 3 = RF)
    uint32   metadata length L
    L bytes  UTF-8 JSON metadata, including an ``arrays`` list of
             [name, dtype, shape] entries
    ...      the arrays' raw little-endian bytes, in list order
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"IMPSCMDL"
FORMAT_VERSION = 1
KIND_CODES = {"LR": 1, "SVM": 2, "RF": 3}
KINDS = tuple(KIND_CODES)
KERNELS = ("linear", "poly", "rbf", "sigmoid")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameters for one model family; unused fields are ignored.

    ``max_depth=None`` grows trees until leaves are pure. ``max_features`` is
    a fraction in (0, 1], an absolute count (int > 1) or ``"sqrt"``.
    ``gamma="scale"`` means ``1 / (n_features * X.var())``.
    """

    model: str = "SVM"
    # SVM
    kernel: str = "rbf"
    C: float = 1.0
    degree: int = 3
    gamma: float | str = "scale"
    coef0: float = 0.0
    svm_tol: float = 1e-3
    svm_max_iter: int = 100_000
    # RF
    n_trees: int = 100
    max_depth: int | None = None
    max_features: float | int | str = "sqrt"
    min_samples_split: int = 2
    # LR
    max_iter: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if self.model not in KINDS:
            raise ModelError(f"model must be one of {KINDS}, got {self.model!r}")
        if self.kernel not in KERNELS:
            raise ModelError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if not (self.C > 0 and math.isfinite(self.C)):
            raise ModelError("C must be positive and finite")
        if self.n_trees < 1:
            raise ModelError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ModelError("max_depth must be >= 1 or None")
        mf = self.max_features
        if isinstance(mf, str):
            if mf != "sqrt":
                raise ModelError("max_features string must be 'sqrt'")
        elif isinstance(mf, float) and not 0 < mf <= 1:
            raise ModelError("max_features fraction must lie in (0, 1]")
        elif isinstance(mf, int) and mf < 1:
            raise ModelError("max_features count must be >= 1")
        if self.max_iter < 1 or self.svm_max_iter < 1:
            raise ModelError("iteration budgets must be >= 1")
        if self.degree < 1:
            raise ModelError("degree must be >= 1")
        if isinstance(self.gamma, str) and self.gamma != "scale":
            raise ModelError("gamma must be a positive number or 'scale'")
        if not isinstance(self.gamma, str) and not self.gamma > 0:
            raise ModelError("gamma must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown hyperparameters {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("max_features"), (int, float)) and not isinstance(d["max_features"], bool):
            mf = d["max_features"]
            d["max_features"] = float(mf) if mf <= 1 else int(mf)
        if "C" in d:
            d["C"] = float(d["C"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def relevant(self) -> dict:
        """Only the fields that affect this model family (for reports)."""
        keys = {
            "SVM": ("kernel", "C"),
            "RF": ("n_trees", "max_depth", "max_features"),
            "LR": ("C", "max_iter"),
        }[self.model]
        return {"model": self.model, **{k: getattr(self, k) for k in keys}}

    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.relevant().items())


def check_Xy(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ModelError("X must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ModelError("X contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ModelError("y length must match the number of rows of X")
    classes = np.unique(y)
    if classes.size < 2:
        raise ModelError("need at least two classes in y")
    if X.shape[0] < classes.size:
        raise ModelError("fewer rows than classes")
    return X, y, classes


class Classifier:
    """Common predict/serialisation surface; subclasses implement ``_fit``."""

    kind = ""

    def __init__(self, params: HyperParams, seed: int = 0):
        self.params = params
        self.seed = int(seed)
        self.classes_ = None
        self.n_features_ = None
        self.converged = True

    def fit(self, X, y):
        X, y, classes = check_Xy(X, y)
        self.classes_ = classes
        self.n_features_ = X.shape[1]
        yi = np.searchsorted(classes, y)
        self._fit(X, yi)
        return self

    def _check_predict(self, X):
        X = check_Xy(X)
        if self.classes_ is None:
            raise ModelError("model is not fitted")
        if X.shape[1] != self.n_features_:
            raise ModelError(f"X has {X.shape[1]} columns, model was fit on {self.n_features_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        P = self._proba(self._check_predict(X))
        P = np.clip(P, 0.0, None)
        s = P.sum(axis=1, keepdims=True)
        bad = ~(s[:, 0] > 0)
        P[bad] = 1.0
        s[bad] = P.shape[1]
        return P / s

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    # serialisation hooks
    def _state(self) -> tuple[dict, dict]:
        raise NotImplementedError

    def _load_state(self, meta: dict, arrays: dict):
        raise NotImplementedError


def save_model(model: Classifier, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_to_bytes(model: Classifier) -> bytes:
    meta, arrays = model._state()
    names = sorted(arrays)
    meta = dict(meta)
    meta.update(
        kind=model.kind,
        params=model.params.to_dict(),
        seed=model.seed,
        classes=[c.item() if hasattr(c, "item") else c for c in model.classes_],
        n_features=model.n_features_,
        converged=bool(model.converged),
        arrays=[[n, _dtype_code(arrays[n]), list(arrays[n].shape)] for n in names],
    )
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HBI", FORMAT_VERSION, KIND_CODES[model.kind], len(blob)), blob]
    for n in names:
        a = arrays[n]
        parts.append(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype.kind == "f":
        return "<f8"
    if a.dtype.kind in "iub":
        return "<i8"
    raise ModelError(f"cannot serialise dtype {a.dtype}")


def load_model(path) -> Classifier:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(data: bytes) -> Classifier:
    from . import MODEL_TYPES

    if data[:8] != MAGIC:
        raise ModelError("not a model file (bad magic)")
    version, code, n = struct.unpack_from("<HBI", data, 8)
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    off = 8 + struct.calcsize("<HBI")
    meta = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    kind = meta["kind"]
    if KIND_CODES.get(kind) != code:
        raise ModelError("kind code does not match metadata")
    arrays = {}
    for name, dt, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        size = count * 8
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float64 if dt == "<f8" else np.int64)
        off += size
    if off != len(data):
        raise ModelError("trailing bytes in model file")
    model = MODEL_TYPES[kind](HyperParams.from_dict(meta["params"]), meta["seed"])
    model.classes_ = np.asarray(meta["classes"])
    model.n_features_ = meta["n_features"]
    model.converged = meta["converged"]
    model._load_state(meta, arrays)
    return model
