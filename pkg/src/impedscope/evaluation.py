"""Patient-grouped folds, classification metrics, ROC/AUC, paired t-tests and
cross-validation aggregation.

Conventions: the paired t-test uses the sample (n-1) standard deviation;
confidence intervals use the t quantile with n-1 degrees of freedom over
trial means.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ALPHA = 0.05


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    groups: tuple[tuple, ...]      # patient ids per fold
    seed: int

    def fold_of(self, patient_ids) -> np.ndarray:
        lookup = {p: k for k, g in enumerate(self.groups) for p in g}
        try:
            return np.array([lookup[p] for p in patient_ids], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"patient {exc.args[0]!r} not in the fold plan") from None

    def splits(self, patient_ids):
        """Yield ``(train_idx, test_idx)`` sample index arrays per fold."""
        folds = self.fold_of(patient_ids)
        for k in range(self.n_folds):
            yield np.flatnonzero(folds != k), np.flatnonzero(folds == k)


def make_lopgo_folds(patient_ids, n_folds: int = 5, seed=0) -> FoldPlan:
    """Shuffle the unique patients with ``seed``, then deal them round-robin."""
    patients = sorted(set(patient_ids))
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(patients) < n_folds:
        raise ValueError(f"{len(patients)} patients cannot fill {n_folds} folds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    groups = [[] for _ in range(n_folds)]
    for pos, i in enumerate(order):
        groups[pos % n_folds].append(patients[i])
    seed_repr = seed if not isinstance(seed, np.random.Generator) else -1
    return FoldPlan(n_folds, tuple(tuple(sorted(g)) for g in groups), seed_repr)


# ---------------------------------------------------------------------------
# label metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryScores:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: tuple[str, ...] = ()


def precision_recall_f1_accuracy(y_true, y_pred, positive_class=1) -> BinaryScores:
    """P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2TP/(2TP+FP+FN), Acc = correct/N.

    A zero denominator yields 0 and a flag naming the metric.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-D and equally long")
    if y_true.size == 0:
        raise ValueError("empty label vectors")
    t = y_true == positive_class
    p = y_pred == positive_class
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    tn = int(np.sum(~t & ~p))
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}: zero denominator")
            return 0.0
        return num / den

    prec = ratio(tp, tp + fp, "precision")
    rec = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    acc = float(np.mean(y_true == y_pred))
    return BinaryScores(prec, rec, f1, acc, tp, fp, fn, tn, tuple(flags))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def micro_scores(cm: np.ndarray) -> dict:
    """Micro-averaged precision/recall/F1 from pooled one-vs-rest counts.

    For two classes the positive class is index 1 (binary scores); for more
    classes micro pooling makes precision = recall = F1 = accuracy.
    """
    cm = np.asarray(cm)
    n = cm.sum()
    acc = float(np.trace(cm) / n) if n else 0.0
    if cm.shape[0] == 2:
        tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
    else:
        tp = np.trace(cm)
        fp = cm.sum() - tp
        fn = fp
    prec = float(tp / (tp + fp)) if tp + fp else 0.0
    rec = float(tp / (tp + fn)) if tp + fn else 0.0
    f1 = float(2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else 0.0
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}


def macro_scores(cm: np.ndarray) -> dict:
    cm = np.asarray(cm)
    k = cm.shape[0]
    n = cm.sum()
    ps, rs, fs = [], [], []
    for c in range(k):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c].sum() - tp
        ps.append(tp / (tp + fp) if tp + fp else 0.0)
        rs.append(tp / (tp + fn) if tp + fn else 0.0)
        fs.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return {"accuracy": float(np.trace(cm) / n) if n else 0.0, "precision": float(np.mean(ps)),
            "recall": float(np.mean(rs)), "f1": float(np.mean(fs))}


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(scores, y_true) -> RocCurve:
    """Threshold-swept ROC; tied scores move in a single (diagonal) step.

    The trapezoidal area under this curve equals the probability that a
    random positive outscores a random negative, ties counted as one half.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y_true).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined: y_true contains a single class")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thr, auc)


def roc_auc(scores, y_true) -> tuple[RocCurve, float]:
    c = roc_curve(scores, y_true)
    return c, c.auc


def pair_auc(scores, y_true) -> float:
    """Exhaustive pair-counting AUC (reference implementation, O(n+ * n-))."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y_true).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both classes")
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def multiclass_auc(prob, y_true, mode: str = "micro", n_classes: int | None = None):
    """One-vs-rest AUC, pooled (micro) or class-averaged (macro).

    Returns ``(auc, info)`` where ``info`` lists per-class AUCs and classes
    excluded from the macro mean because they are absent from ``y_true``.
    For two classes both modes reduce to the binary AUC of column 1.
    """
    P = np.asarray(prob, dtype=float)
    y = np.asarray(y_true, dtype=np.int64)
    k = n_classes or P.shape[1]
    if P.ndim != 2 or P.shape != (y.size, k):
        raise ValueError("prob must be [n_samples, n_classes]")
    info = {"per_class": {}, "excluded": []}
    if k == 2:
        a = roc_curve(P[:, 1], y == 1).auc
        info["per_class"] = {0: roc_curve(P[:, 0], y == 0).auc, 1: a}
        return a, info
    for c in range(k):
        t = y == c
        if t.all() or not t.any():
            info["excluded"].append(c)
            continue
        info["per_class"][c] = roc_curve(P[:, c], t).auc
    if mode == "micro":
        onehot = np.zeros_like(P, dtype=bool)
        onehot[np.arange(y.size), y] = True
        return roc_curve(P.ravel(), onehot.ravel()).auc, info
    if mode == "macro":
        if info["excluded"]:
            logger.info("classes %s absent from y_true; excluded from macro AUC", info["excluded"])
        if not info["per_class"]:
            raise ValueError("no class has both positives and negatives")
        return float(np.mean(list(info["per_class"].values()))), info
    raise ValueError(f"mode must be 'micro' or 'macro', got {mode!r}")


def roc_curves_ovr(prob, y_true, n_classes: int) -> dict:
    """Per-class one-vs-rest curves plus the pooled micro curve."""
    P = np.asarray(prob, dtype=float)
    y = np.asarray(y_true, dtype=np.int64)
    out = {}
    cols = [1] if n_classes == 2 else range(n_classes)
    for c in cols:
        t = y == c
        if t.any() and not t.all():
            out[c] = roc_curve(P[:, c], t)
    onehot = np.zeros_like(P, dtype=bool)
    onehot[np.arange(y.size), y] = True
    if n_classes == 2:
        out["micro"] = out.get(1)
    else:
        out["micro"] = roc_curve(P.ravel(), onehot.ravel())
    return out


# ---------------------------------------------------------------------------
# Student t distribution
# ---------------------------------------------------------------------------

def _betacf(a, b, x, tol=1e-12, max_iter=500):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    logger.warning("incomplete beta continued fraction did not converge")
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student's t (bisection on the two-sided tail)."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    upper = q > 0.5
    tail = 2.0 * (1.0 - q if upper else q)      # two-sided tail mass
    lo, hi = 0.0, 1.0
    while t_sf_two_sided(hi, df) > tail:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_sf_two_sided(mid, df) > tail:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    return x if upper else -x


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    significant: bool
    mean_diff: float
    flag: str = ""


def paired_t_test(a, b, alpha: float = ALPHA) -> TTestResult:
    """Two-sided paired t-test of ``a - b``; sample (n-1) std of differences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and equally long")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or sd < 1e-15 * max(1.0, abs(mean)):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, False, 0.0, "zero variance, zero mean")
        t = math.copysign(math.inf, mean)
        return TTestResult(t, 0.0, n - 1, True, mean, "zero variance, nonzero mean")
    t = mean / (sd / math.sqrt(n))
    p = t_sf_two_sided(t, n - 1)
    return TTestResult(float(t), float(p), n - 1, bool(p < alpha), mean)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class CVSummary:
    mean: float
    ci_low: float
    ci_high: float
    half_width: float
    n: int
    trial_means: list[float]
    values: list[float]
    flag: str = ""

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "ci_half_width": self.half_width, "n": self.n,
                "trial_means": list(self.trial_means), "flag": self.flag}


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, str]:
    """Mean and t-based half-width (sample std, n-1 df)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    m = float(v.mean())
    if v.size == 1:
        return m, 0.0, "single value: interval degenerate"
    sd = float(v.std(ddof=1))
    q = t_ppf(0.5 + level / 2.0, v.size - 1)
    return m, q * sd / math.sqrt(v.size), ""


def aggregate_cv(fold_values, trials=None, over: str = "trials", level: float = 0.95) -> CVSummary:
    """Summarise per-fold metric values.

    ``fold_values`` is either a [trials][folds] nested sequence, or a flat
    sequence with a parallel ``trials`` id list. With ``over="trials"`` the
    interval is over trial means, with ``over="folds"`` over every fold value.
    NaN fold values (undefined metric) are skipped.
    """
    if trials is None:
        nested = [list(map(float, row)) for row in fold_values]
    else:
        groups: dict = {}
        for v, t in zip(fold_values, trials):
            groups.setdefault(t, []).append(float(v))
        nested = [groups[t] for t in sorted(groups)]
    if not nested:
        raise ValueError("need at least one trial")
    flat = [v for row in nested for v in row]
    trial_means = [float(np.nanmean(row)) for row in nested if np.any(np.isfinite(row))]
    if over == "trials":
        vals = trial_means
    elif over == "folds":
        vals = [v for v in flat if math.isfinite(v)]
    else:
        raise ValueError("over must be 'trials' or 'folds'")
    m, hw, flag = mean_ci(vals, level)
    return CVSummary(m, m - hw, m + hw, hw, len(vals), trial_means, flat, flag)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc_micro: float
    auc_macro: float
    auc_per_class: dict
    confusion: np.ndarray
    roc: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "auc_micro": self.auc_micro, "auc_macro": self.auc_macro,
            "auc_per_class": {str(k): v for k, v in self.auc_per_class.items()},
            "confusion_matrix": self.confusion.tolist(),
        }


def evaluate_predictions(prob, y_true, n_classes: int, averaging: str = "micro") -> MetricReport:
    """Full metric set for one set of probabilistic predictions.

    Hard labels are the probability argmax. Label metrics use ``averaging``
    (micro or macro) for multiclass problems; binary problems always score
    the positive class (index 1).
    """
    P = np.asarray(prob, dtype=float)
    y = np.asarray(y_true, dtype=np.int64)
    pred = np.argmax(P, axis=1)
    cm = confusion_matrix(y, pred, n_classes)
    sc = micro_scores(cm) if (n_classes == 2 or averaging == "micro") else macro_scores(cm)
    try:
        auc_mi, info = multiclass_auc(P, y, "micro", n_classes)
        auc_ma, _ = multiclass_auc(P, y, "macro", n_classes)
        roc = roc_curves_ovr(P, y, n_classes)
    except ValueError:
        auc_mi = auc_ma = float("nan")
        info = {"per_class": {}}
        roc = {}
    return MetricReport(sc["accuracy"], sc["precision"], sc["recall"], sc["f1"], auc_mi, auc_ma,
                        info["per_class"], cm, roc)
