"""Config-driven experiment runner.

The optimisation schedule runs five stages:

1. baseline          default SVM / RF / LR on all patterns and frequencies
2. frequency sweep   top-f_T frequencies (PCA ranking fit per training split)
3. IIVV sweep        every geometric mask plus the impedance-threshold mask
4. tuning            best-4 masks x best-4 f_T x model grids
5. final evaluation  fresh patient-grouped folds, pooled out-of-fold scores

Every (configuration, trial, fold) evaluation is an independent work item;
items run on a thread pool and are reassembled by key, so results do not
depend on the worker count. Fold plans and model seeds come from named
substreams of the root seed (``folds``/``model`` for the cross-validation
stages, ``final-folds``/``final-model`` for the final stage), which is why
``f_T = N_freq`` and the ``All`` mask reproduce the baseline exactly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import classifiers as clf
from .classifiers import HyperParams
from .data_model import Category, Dataset, TaskSpec, load_dataset
from .evaluation import (
    aggregate_cv,
    evaluate_predictions,
    make_lopgo_folds,
    paired_t_test,
)
from .frequency_ranking import FrequencyRanking, frequency_importance, rank, select_top_frequencies
from .geometry import (
    ElectrodeArray,
    MaskValidationError,
    build_geometric_mask,
    build_zthreshold_mask,
    frequency_index_nearest,
    load_mask_rules,
    pattern_means_at,
    validate_masks,
)
from .preprocessing import FilterConfig, PreparedDataset, apply_completeness_gate, fit_zscore, apply_zscore, prepare
from .seeding import substream, subseed
from .synth import generate_cohort, load_cohort_config, with_seed

logger = logging.getLogger(__name__)

STAGES = ("baseline", "frequency", "iivv", "tuning", "final")
METRICS = ("AUC", "Acc", "F1")
ALL_MASKS = ("All", "Long a+", "Long a+ ext.", "Med. a+ ext.", "Skip1 close", "Adj. close",
             "Med. adj.", "Adj. far", "Skip1 medium", "Skip1 far", "Opp. close", "Opp. medium",
             "Opp. far")
DECADES = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]


class ConfigError(ValueError):
    """Invalid experiment configuration (reported with exit code 2)."""


def default_grids() -> dict:
    return {
        "SVM": {"kernel": ["linear", "poly", "rbf", "sigmoid"], "C": list(DECADES)},
        "RF": {"n_trees": [100, 200, 300, 800], "max_depth": [4, 8, 16], "max_features": [0.3, 0.7, 1.0]},
        "LR": {"C": list(DECADES), "max_iter": [200, 500, 2000]},
    }


def expand_grid(model: str, grid: dict) -> list[HyperParams]:
    """Cartesian product in key order given by the grid dict."""
    keys = list(grid)
    combos = [{}]
    for k in keys:
        vals = grid[k]
        if not isinstance(vals, (list, tuple)) or not vals:
            raise ConfigError(f"grid {model}.{k} must be a non-empty list")
        combos = [{**c, k: v} for c in combos for v in vals]
    return [HyperParams.from_dict({"model": model, **c}) for c in combos]


@dataclass
class ExperimentConfig:
    task: int = 1
    seed: int = 0
    dataset: str | None = None
    synthetic: dict | None = None
    filter: dict = field(default_factory=dict)
    c_th: float | None = None
    n_folds: int = 5
    trials: dict = field(default_factory=lambda: {"baseline": 10, "frequency": 10, "iivv": 5,
                                                  "tuning": 10, "final": 1})
    masks: list = field(default_factory=lambda: list(ALL_MASKS))
    mask_rules: str | None = None
    geometry: str | None = None
    zthreshold: dict = field(default_factory=lambda: {
        "enabled": True, "quantiles": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "sides": ["below", "above"], "mode": "per_fold", "frequency_hz": 100.0})
    f_t_range: list = field(default_factory=lambda: [1, 31])
    models: list = field(default_factory=lambda: ["SVM", "RF", "LR"])
    sweep_model: str = "SVM"
    baseline_params: dict = field(default_factory=dict)
    grids: dict = field(default_factory=default_grids)
    tuning_metric: str = "AUC"
    averaging: dict = field(default_factory=lambda: {"baseline": "micro", "frequency": "micro",
                                                     "iivv": "micro", "tuning": "macro",
                                                     "final": "micro"})
    n_best: int = 4
    combinations: dict | None = None
    pca: dict = field(default_factory=lambda: {"observation": "pattern_rows", "n_components": 10})
    ci_over: str = "trials"
    workers: int | None = None
    shuffle_labels: int | None = None
    winners: dict | None = None
    alpha: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        for key in ("trials", "averaging", "zthreshold", "pca"):
            if key in d:
                d[key] = {**getattr(base, key), **d[key]}
        if "grids" in d:
            d["grids"] = {**base.grids, **d["grids"]}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        TaskSpec.get(self.task)
        if self.dataset is None and self.synthetic is None:
            raise ConfigError("config needs either 'dataset' or 'synthetic'")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        for s in STAGES:
            if int(self.trials.get(s, 0)) < 1:
                raise ConfigError(f"trials.{s} must be >= 1")
        if not self.masks:
            raise ConfigError("mask list is empty")
        if self.tuning_metric not in METRICS:
            raise ConfigError(f"tuning_metric must be one of {METRICS}")
        for s, a in self.averaging.items():
            if a not in ("micro", "macro"):
                raise ConfigError(f"averaging.{s} must be micro or macro")
        if not self.models or any(m not in clf.KINDS for m in self.models):
            raise ConfigError(f"models must be a non-empty subset of {clf.KINDS}")
        if self.sweep_model not in clf.KINDS:
            raise ConfigError("sweep_model must be SVM, RF or LR")
        lo, hi = self.f_t_range
        if not 1 <= lo <= hi:
            raise ConfigError("f_t_range must satisfy 1 <= low <= high")
        for m in self.models:
            if m not in self.grids:
                raise ConfigError(f"no grid for model {m}")
            expand_grid(m, self.grids[m])
        if self.n_best < 1:
            raise ConfigError("n_best must be >= 1")
        if self.ci_over not in ("trials", "folds"):
            raise ConfigError("ci_over must be 'trials' or 'folds'")
        if self.zthreshold.get("mode") not in ("per_fold", "global"):
            raise ConfigError("zthreshold.mode must be per_fold or global")
        if self.pca.get("observation") not in ("pattern_rows", "flattened"):
            raise ConfigError("pca.observation must be pattern_rows or flattened")

    def filter_config(self) -> FilterConfig:
        f = dict(self.filter)
        if self.c_th is not None:
            f["completeness_threshold"] = self.c_th
        return FilterConfig.from_dict(f)


def baseline_params(model: str, overrides: dict | None = None) -> HyperParams:
    hp = clf.default_params(model)
    if overrides and model in overrides:
        hp = replace(hp, **overrides[model])
    return hp


# ---------------------------------------------------------------------------
# evaluation keys and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatternSpec:
    kind: str                 # "mask" or "zthr"
    name: str = "All"
    quantile: float = 0.5
    side: str = "below"

    def label(self) -> str:
        if self.kind == "mask":
            return self.name
        return f"z-threshold(q={self.quantile:g},{self.side})"


@dataclass(frozen=True)
class FreqSpec:
    f_t: int | None = None    # None = all frequencies

    def label(self, n_freq: int) -> str:
        return f"f_T={self.f_t or n_freq}"


@dataclass
class FoldResult:
    trial: int
    fold: int
    metrics: dict
    n_input: int
    n_test: int
    test_idx: np.ndarray | None = None
    prob: np.ndarray | None = None
    converged: bool = True
    extra: dict = field(default_factory=dict)


@dataclass
class ConfigResult:
    label: str
    pattern: PatternSpec
    freq: FreqSpec
    params: HyperParams
    folds: list[FoldResult]
    averaging: str
    summary: dict = field(default_factory=dict)

    def values(self, metric: str) -> dict:
        return {(f.trial, f.fold): f.metrics[metric] for f in self.folds}

    def to_dict(self, ci_over: str = "trials") -> dict:
        return {
            "label": self.label,
            "pattern": self.pattern.label(),
            "f_t": self.freq.f_t,
            "params": self.params.relevant(),
            "averaging": self.averaging,
            "n_input": self.folds[0].n_input if self.folds else None,
            "summary": self.summary,
            "folds": [{"trial": f.trial, "fold": f.fold, "n_test": f.n_test, "n_input": f.n_input,
                       "converged": f.converged, **f.metrics, **f.extra} for f in self.folds],
        }


def metric_key(metric: str) -> str:
    return {"AUC": "auc", "Acc": "accuracy", "F1": "f1"}[metric]


def _summarise(folds: list[FoldResult], ci_over: str) -> dict:
    out = {}
    for m in ("auc", "accuracy", "f1", "precision", "recall"):
        vals = [[f.metrics[m] for f in folds if f.trial == t] for t in sorted({f.trial for f in folds})]
        try:
            s = aggregate_cv(vals, over=ci_over)
            out[m] = s.to_dict()
        except ValueError:
            out[m] = {"mean": float("nan")}
    return out


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------

class Pipeline:
    """Holds the gated, task-filtered cohort plus caches shared by the stages."""

    def __init__(self, config: ExperimentConfig, prepared: PreparedDataset | None = None,
                 dataset: Dataset | None = None, progress=None):
        self.config = config
        self.task = TaskSpec.get(config.task)
        self.progress = progress
        self.array = ElectrodeArray.load(config.geometry) if config.geometry else ElectrodeArray.default()
        self.rules = load_mask_rules(config.mask_rules)
        if prepared is None:
            dataset = dataset if dataset is not None else load_input(config)
            prepared = prepare(dataset, config.filter_config())
        gated = apply_completeness_gate(prepared, config.filter_config().completeness_threshold)
        self.prepared, self.y = gated.for_task(self.task)
        self.n_removed_by_gate = len(prepared) - len(gated)
        present = set(self.y.tolist())
        missing = [str(c) for i, c in enumerate(self.task.classes) if i not in present]
        if missing:
            raise ConfigError(f"task {self.task.task_id} classes absent from dataset: {missing}")
        if config.shuffle_labels is not None:
            rng = substream(config.shuffle_labels, "shuffle-labels")
            self.y = self.y[rng.permutation(self.y.size)]
        self.n_freq = len(self.prepared.grid)
        self.n_classes = self.task.n_classes
        self.workers = config.workers or min(4, os.cpu_count() or 1)
        self._memo: dict = {}
        self._rank_cache: dict = {}
        self._mask_cache: dict = {}
        self._lock = threading.Lock()
        self._patient_ids = list(self.prepared.patient_ids)
        self._full = self.prepared.zmag.reshape(len(self.prepared), -1)
        self.results: dict[str, Any] = {}

    # -- folds and seeds --------------------------------------------------
    def fold_plan(self, purpose: str, trial: int):
        rng = substream(self.config.seed, purpose, trial)
        return make_lopgo_folds(self._patient_ids, self.config.n_folds, rng)

    def splits(self, purpose: str, trial: int):
        return list(self.fold_plan(purpose, trial).splits(self._patient_ids))

    # -- cached building blocks ---------------------------------------------
    def mask_indices(self, name: str) -> np.ndarray:
        if name not in self._mask_cache:
            self._mask_cache[name] = build_geometric_mask(name, self.array, self.rules).indices
        return self._mask_cache[name]

    def ranking(self, purpose: str, trial: int, fold: int, train_idx) -> list[int]:
        key = (purpose, trial, fold)
        with self._lock:
            hit = self._rank_cache.get(key)
        if hit is None:
            imp = frequency_importance(self.prepared.zmag, self.prepared.valid, train_idx,
                                       observation=self.config.pca["observation"],
                                       n_components=int(self.config.pca["n_components"]))
            hit = (rank(imp.scores), imp)
            with self._lock:
                self._rank_cache[key] = hit
        return hit[0]

    def zthr_indices(self, spec: PatternSpec, train_idx) -> tuple[np.ndarray, float]:
        zcfg = self.config.zthreshold
        fidx = frequency_index_nearest(self.prepared.grid.values, zcfg.get("frequency_hz", 100.0))
        rows = train_idx if zcfg["mode"] == "per_fold" else np.arange(len(self.prepared))
        means = pattern_means_at(self.prepared.zmag[rows], self.prepared.valid[rows], fidx)
        finite = means[np.isfinite(means)]
        thr = float(np.quantile(finite, spec.quantile)) if finite.size else float("nan")
        return build_zthreshold_mask(means, thr, spec.side).indices, thr

    # -- one work item ------------------------------------------------------
    def evaluate_fold(self, pattern: PatternSpec, freq: FreqSpec, hp: HyperParams, averaging: str,
                      purpose: str, trial: int, fold: int, train_idx, test_idx,
                      keep_prob: bool = False) -> FoldResult:
        key = (pattern, freq, hp, averaging, purpose, trial, fold)
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None and (hit.prob is not None or not keep_prob):
            return hit
        extra = {}
        if pattern.kind == "mask":
            pidx = self.mask_indices(pattern.name)
        else:
            pidx, thr = self.zthr_indices(pattern, train_idx)
            extra["threshold_ohm"] = thr
        if freq.f_t is None or freq.f_t >= self.n_freq:
            fidx = np.arange(self.n_freq)
        else:
            fidx = np.asarray(select_top_frequencies(
                self.ranking(purpose, trial, fold, train_idx), freq.f_t))
            extra["frequencies"] = [int(i) + 1 for i in fidx]
        nan_metrics = {k: float("nan") for k in ("auc", "accuracy", "f1", "precision", "recall")}
        if pidx.size == 0:
            res = FoldResult(trial, fold, nan_metrics, 0, len(test_idx), extra={**extra, "empty": True})
        else:
            Xtr, Xte, n_input = self._features(pidx, fidx, train_idx, test_idx)
            ytr = self.y[train_idx]
            seed = subseed(self.config.seed, "final-model" if purpose.startswith("final") else "model",
                           trial, fold)
            if np.unique(ytr).size < 2:
                res = FoldResult(trial, fold, nan_metrics, n_input, len(test_idx), extra=extra)
            else:
                model = clf.fit(Xtr, ytr, hp, seed)
                P = self._full_proba(model, Xte)
                rep = evaluate_predictions(P, self.y[test_idx], self.n_classes, averaging)
                auc = rep.auc_micro if averaging == "micro" else rep.auc_macro
                metrics = {"auc": auc, "accuracy": rep.accuracy, "f1": rep.f1,
                           "precision": rep.precision, "recall": rep.recall}
                res = FoldResult(trial, fold, metrics, n_input, len(test_idx),
                                 np.asarray(test_idx) if keep_prob else None,
                                 P if keep_prob else None, bool(model.converged), extra)
        with self._lock:
            self._memo[key] = res
        return res

    def _features(self, pidx, fidx, train_idx, test_idx):
        n_p, n_f = pidx.size, fidx.size
        if n_p == self.prepared.n_patterns and n_f == self.n_freq:
            Xtr, Xte = self._full[train_idx], self._full[test_idx]
            col_f = np.tile(np.arange(n_f), n_p)
        else:
            z = self.prepared.zmag
            Xtr = z[train_idx][:, pidx][:, :, fidx].reshape(len(train_idx), -1)
            Xte = z[test_idx][:, pidx][:, :, fidx].reshape(len(test_idx), -1)
            col_f = np.tile(fidx, n_p)
        mode = self.config.filter_config().zscore_mode
        params = fit_zscore(Xtr, col_f, mode)
        return apply_zscore(Xtr, params), apply_zscore(Xte, params), n_p * n_f

    def _full_proba(self, model, Xte):
        """Probabilities over all task classes, even if training lacked some."""
        P = model.predict_proba(Xte)
        if P.shape[1] == self.n_classes:
            return P
        full = np.zeros((P.shape[0], self.n_classes))
        full[:, np.asarray(model.classes_, dtype=np.int64)] = P
        return full

    # -- batches ------------------------------------------------------------
    def run_configs(self, configs, n_trials: int, averaging: str, purpose: str = "folds",
                    keep_prob: bool = False) -> list[ConfigResult]:
        """Evaluate every (config, trial, fold); deterministic assembly by key."""
        splits = {t: self.splits(purpose, t) for t in range(n_trials)}
        items = [(ci, t, k) for ci in range(len(configs)) for t in range(n_trials)
                 for k in range(self.config.n_folds)]

        def work(item):
            ci, t, k = item
            pattern, freq, hp = configs[ci]
            tr, te = splits[t][k]
            return self.evaluate_fold(pattern, freq, hp, averaging, purpose, t, k, tr, te, keep_prob)

        # frequency rankings first, so concurrent items never race to build the same one
        need_rank = any(f.f_t is not None and f.f_t < self.n_freq for _, f, _ in configs)
        if need_rank:
            keys = [(t, k) for t in range(n_trials) for k in range(self.config.n_folds)]
            self._map(lambda tk: self.ranking(purpose, tk[0], tk[1], splits[tk[0]][tk[1]][0]), keys)
        outs = self._map(work, items)
        grouped: dict[int, list[FoldResult]] = {}
        for (ci, _, _), r in zip(items, outs):
            grouped.setdefault(ci, []).append(r)
        results = []
        for ci, (pattern, freq, hp) in enumerate(configs):
            label = f"{pattern.label()} | {freq.label(self.n_freq)} | {hp.label()}"
            cr = ConfigResult(label, pattern, freq, hp, grouped[ci], averaging)
            cr.summary = _summarise(cr.folds, self.config.ci_over)
            results.append(cr)
        return results

    def _map(self, fn, items):
        if self.workers <= 1 or len(items) <= 1:
            out = []
            for i, it in enumerate(items):
                out.append(fn(it))
                if self.progress:
                    self.progress(i + 1, len(items))
            return out
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            return list(ex.map(fn, items))

    def with_shuffled_labels(self, seed: int) -> "Pipeline":
        """Shallow copy sharing the |Z| cube, with permuted labels and empty caches."""
        import copy

        other = copy.copy(self)
        rng = substream(seed, "shuffle-labels")
        other.y = self.y[rng.permutation(self.y.size)]
        other.config = replace(self.config, shuffle_labels=int(seed))
        other._memo, other._rank_cache, other.results = {}, dict(self._rank_cache), {}
        other._lock = threading.Lock()
        return other

    # -- comparisons --------------------------------------------------------
    def compare(self, result: ConfigResult, reference: ConfigResult, metric: str = "auc") -> dict:
        a, b = result.values(metric), reference.values(metric)
        keys = sorted(k for k in set(a) & set(b) if math.isfinite(a[k]) and math.isfinite(b[k]))
        if len(keys) < 2:
            return {"n_pairs": len(keys), "t": None, "p": None, "significant": False,
                    "flag": "fewer than two paired folds"}
        r = paired_t_test([a[k] for k in keys], [b[k] for k in keys], self.config.alpha)
        return {"n_pairs": len(keys), "t": r.t, "p": r.p, "significant": r.significant,
                "mean_diff": r.mean_diff, "flag": r.flag}


def load_input(config: ExperimentConfig) -> Dataset:
    if config.dataset is not None:
        return load_dataset(config.dataset)
    spec, models, names = load_cohort_config(config.synthetic)
    return generate_cohort(with_seed(spec, spec.seed), models, pathology=names)


def _best(results: list[ConfigResult], metric: str, n: int) -> list[ConfigResult]:
    key = metric_key(metric)

    def score(r):
        m = r.summary.get(key, {}).get("mean", float("nan"))
        return -m if math.isfinite(m) else math.inf

    order = sorted(range(len(results)), key=lambda i: (score(results[i]), i))
    return [results[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _ensure(pipeline_or_config, **kw) -> Pipeline:
    if isinstance(pipeline_or_config, Pipeline):
        return pipeline_or_config
    return Pipeline(pipeline_or_config, **kw)


def run_baseline(config, **kw) -> dict:
    """Default-hyperparameter models on all patterns and frequencies."""
    pl = _ensure(config, **kw)
    cfg = pl.config
    confs = [(PatternSpec("mask", "All"), FreqSpec(None), baseline_params(m, cfg.baseline_params))
             for m in cfg.models]
    if cfg.sweep_model not in cfg.models:
        confs.append((PatternSpec("mask", "All"), FreqSpec(None),
                      baseline_params(cfg.sweep_model, cfg.baseline_params)))
    res = pl.run_configs(confs, cfg.trials["baseline"], cfg.averaging["baseline"])
    by_model = {r.params.model: r for r in res}
    stage = {"stage": "baseline", "averaging": cfg.averaging["baseline"],
             "n_trials": cfg.trials["baseline"], "n_samples": len(pl.y),
             "n_input": pl.prepared.n_patterns * pl.n_freq,
             "results": {m: r.to_dict(cfg.ci_over) for m, r in by_model.items()}}
    pl.results["baseline"] = {"stage": stage, "raw": by_model}
    return stage


def _baseline_ref(pl: Pipeline, model: str) -> ConfigResult:
    if "baseline" not in pl.results:
        run_baseline(pl)
    raw = pl.results["baseline"]["raw"]
    if model not in raw:
        cfg = pl.config
        r = pl.run_configs([(PatternSpec("mask", "All"), FreqSpec(None),
                             baseline_params(model, cfg.baseline_params))],
                           cfg.trials["baseline"], cfg.averaging["baseline"])[0]
        raw[model] = r
    return raw[model]


def run_frequency_sweep(config, **kw) -> dict:
    """Mean AUC vs number of top-ranked frequencies, All patterns."""
    pl = _ensure(config, **kw)
    cfg = pl.config
    ref = _baseline_ref(pl, cfg.sweep_model)
    hp = baseline_params(cfg.sweep_model, cfg.baseline_params)
    lo, hi = cfg.f_t_range
    hi = min(hi, pl.n_freq)
    confs = [(PatternSpec("mask", "All"), FreqSpec(None if f == pl.n_freq else f), hp)
             for f in range(lo, hi + 1)]
    res = pl.run_configs(confs, cfg.trials["frequency"], cfg.averaging["frequency"])
    rows = []
    for f, r in zip(range(lo, hi + 1), res):
        rows.append({"f_t": f, **r.to_dict(cfg.ci_over), "vs_baseline": pl.compare(r, ref)})
    best = _best(res, cfg.tuning_metric, cfg.n_best)
    best_ft = [b.freq.f_t or pl.n_freq for b in best]
    ranking = composite_ranking(pl, "folds", 0)
    stage = {"stage": "frequency", "model": cfg.sweep_model, "averaging": cfg.averaging["frequency"],
             "n_trials": cfg.trials["frequency"], "results": rows, "best": best_ft,
             "composite_ranking": ranking.to_dict(pl.prepared.grid)}
    pl.results["frequency"] = {"stage": stage, "raw": res, "best": best_ft, "ranking": ranking}
    return stage


def composite_ranking(pl: Pipeline, purpose: str, trial: int) -> FrequencyRanking:
    per, scores, expl, ncomp, prov = [], [], [], [], []
    for k, (tr, _) in enumerate(pl.splits(purpose, trial)):
        r = pl.ranking(purpose, trial, k, tr)
        imp = pl._rank_cache[(purpose, trial, k)][1]
        per.append(r)
        scores.append(imp.scores)
        expl.append(imp.explained_fraction)
        ncomp.append(imp.n_components)
        prov.append({"trial": trial, "fold": k, "n_train_samples": int(len(tr))})
    return FrequencyRanking(per, scores, explained=expl, n_components=ncomp, provenance=prov)


def run_iivv_sweep(config, **kw) -> dict:
    """Every named mask plus the best impedance-threshold mask, all frequencies."""
    pl = _ensure(config, **kw)
    cfg = pl.config
    report = validate_masks(pl.array, pl.rules)
    bad = [r for r in report if r["mask"] in cfg.masks and not r["ok"]]
    unknown = [m for m in cfg.masks if m not in pl.rules]
    if unknown:
        raise ConfigError(f"unknown masks {unknown}")
    if bad:
        raise MaskValidationError(bad[0]["mask"], "mask reference comparison failed:\n" + format_mask_table(bad))
    ref = _baseline_ref(pl, cfg.sweep_model)
    hp = baseline_params(cfg.sweep_model, cfg.baseline_params)
    n_tr = cfg.trials["iivv"]
    confs = [(PatternSpec("mask", m), FreqSpec(None), hp) for m in cfg.masks]
    res = pl.run_configs(confs, n_tr, cfg.averaging["iivv"])
    zres = []
    if cfg.zthreshold.get("enabled", True):
        zconfs = [(PatternSpec("zthr", quantile=float(q), side=s), FreqSpec(None), hp)
                  for q in cfg.zthreshold["quantiles"] for s in cfg.zthreshold["sides"]]
        zres = pl.run_configs(zconfs, n_tr, cfg.averaging["iivv"])
    z_best = _best(zres, cfg.tuning_metric, 1)[0] if zres else None
    candidates = res + ([z_best] if z_best is not None else [])
    best = _best(candidates, cfg.tuning_metric, cfg.n_best)
    rows = []
    for r in res:
        rows.append({"mask": r.pattern.name, "n_iivv": int(pl.mask_indices(r.pattern.name).size),
                     **r.to_dict(cfg.ci_over), "vs_baseline": pl.compare(r, ref)})
    ztrace = [{"quantile": r.pattern.quantile, "side": r.pattern.side,
               "mean_threshold_ohm": float(np.nanmean([f.extra.get("threshold_ohm", np.nan)
                                                       for f in r.folds])),
               "mean_n_iivv": float(np.mean([f.n_input / pl.n_freq for f in r.folds])),
               **r.to_dict(cfg.ci_over)} for r in zres]
    ranked = [r["mask"] for r in sorted(rows, key=lambda x: -_mean(x, metric_key(cfg.tuning_metric)))]
    stage = {"stage": "iivv", "model": cfg.sweep_model, "averaging": cfg.averaging["iivv"],
             "n_trials": n_tr, "results": rows, "ranked": ranked, "zthreshold": ztrace,
             "zthreshold_best": None if z_best is None else {
                 "quantile": z_best.pattern.quantile, "side": z_best.pattern.side,
                 "summary": z_best.summary, "vs_baseline": pl.compare(z_best, ref)},
             "best": [b.pattern.label() for b in best]}
    pl.results["iivv"] = {"stage": stage, "raw": res, "best": [b.pattern for b in best]}
    return stage


def _mean(row, key):
    m = row["summary"].get(key, {}).get("mean", float("nan"))
    return m if math.isfinite(m) else -math.inf


def _parse_pattern(label) -> PatternSpec:
    if isinstance(label, PatternSpec):
        return label
    if isinstance(label, dict):
        return PatternSpec("zthr", quantile=float(label["quantile"]), side=label["side"])
    return PatternSpec("mask", label)


def run_combination_tuning(config, **kw) -> dict:
    """Grid search over best masks x best f_T x model families."""
    pl = _ensure(config, **kw)
    cfg = pl.config
    if cfg.combinations:
        patterns = [_parse_pattern(m) for m in cfg.combinations["masks"]]
        fts = [int(f) for f in cfg.combinations["f_t"]]
    else:
        if "frequency" not in pl.results:
            run_frequency_sweep(pl)
        if "iivv" not in pl.results:
            run_iivv_sweep(pl)
        patterns = pl.results["iivv"]["best"]
        fts = pl.results["frequency"]["best"]
    metric = metric_key(cfg.tuning_metric)
    avg = cfg.averaging["tuning"]
    n_tr = cfg.trials["tuning"]
    winners, traces = {}, {}
    raw_winners = {}
    for model in cfg.models:
        grid = expand_grid(model, cfg.grids[model])
        confs = [(p, FreqSpec(None if f >= pl.n_freq else f), hp)
                 for p in patterns for f in fts for hp in grid]
        res = pl.run_configs(confs, n_tr, avg)
        best = _best(res, cfg.tuning_metric, 1)[0]
        raw_winners[model] = best
        f_t = best.freq.f_t or pl.n_freq
        n_iivv = best.folds[0].n_input // f_t if best.folds else None
        winners[model] = {"pattern": best.pattern.label(), "pattern_spec": asdict(best.pattern),
                          "f_t": f_t, "params": best.params.to_dict(),
                          "n_iivv": n_iivv, "n_input": best.folds[0].n_input if best.folds else None,
                          "score": best.summary.get(metric, {}).get("mean"),
                          "summary": best.summary}
        traces[model] = [{"pattern": r.pattern.label(), "f_t": r.freq.f_t or pl.n_freq,
                          "params": r.params.relevant(), "n_input": r.folds[0].n_input,
                          "mean": r.summary.get(metric, {}).get("mean"),
                          "ci_half_width": r.summary.get(metric, {}).get("ci_half_width")}
                         for r in res]
    overall = max(winners, key=lambda m: (_finite(winners[m]["score"]), -cfg.models.index(m)))
    stage = {"stage": "tuning", "metric": cfg.tuning_metric, "averaging": avg, "n_trials": n_tr,
             "masks": [p.label() for p in patterns], "f_t": fts, "winners": winners,
             "best_model": overall, "trace": traces, "n_evaluations": sum(len(t) for t in traces.values())}
    pl.results["tuning"] = {"stage": stage, "raw": raw_winners}
    return stage


def _finite(x):
    return x if x is not None and math.isfinite(x) else -math.inf


def run_final_evaluation(config, winner: dict | None = None, **kw) -> dict:
    """Fresh folds; pooled out-of-fold probabilities for each winning model."""
    pl = _ensure(config, **kw)
    cfg = pl.config
    if winner is None:
        winner = cfg.winners
    if winner is None:
        if "tuning" not in pl.results:
            run_combination_tuning(pl)
        winner = pl.results["tuning"]["stage"]["winners"]
    avg = cfg.averaging["final"]
    n_tr = cfg.trials["final"]
    out = {"stage": "final", "averaging": avg, "n_trials": n_tr, "models": {}}
    for model in sorted(winner):
        w = winner[model]
        spec = w.get("pattern_spec")
        pattern = PatternSpec(**spec) if spec else _parse_pattern(w["pattern"])
        hp = HyperParams.from_dict(w["params"])
        f_t = int(w["f_t"])
        freq = FreqSpec(None if f_t >= pl.n_freq else f_t)
        res = pl.run_configs([(pattern, freq, hp)], n_tr, avg, purpose="final-folds", keep_prob=True)[0]
        trials = []
        for t in range(n_tr):
            folds = [f for f in res.folds if f.trial == t and f.prob is not None]
            idx = np.concatenate([f.test_idx for f in folds])
            P = np.concatenate([f.prob for f in folds])
            order = np.argsort(idx, kind="stable")
            idx, P = idx[order], P[order]
            rep = evaluate_predictions(P, pl.y[idx], pl.n_classes, avg)
            trials.append((rep, idx, P))
        rep, idx, P = trials[0]
        out["models"][model] = {
            "pattern": pattern.label(), "f_t": f_t, "params": hp.relevant(),
            "n_input": res.folds[0].n_input,
            "pooled": rep.to_dict(),
            "auc": rep.auc_micro if avg == "micro" else rep.auc_macro,
            "fold_mean": res.summary,
            "trial_pooled_auc": [(r.auc_micro if avg == "micro" else r.auc_macro) for r, _, _ in trials],
            "_roc": rep.roc, "_prob": P, "_idx": idx,
        }
    best = max(out["models"], key=lambda m: (_finite(out["models"][m]["auc"]), m))
    out["best_model"] = best
    out["classes"] = [str(c) for c in pl.task.classes]
    pl.results["final"] = out
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, Category):
        return str(obj)
    return obj


def dump_json(obj, path):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return v


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def format_mask_table(rows) -> str:
    head = f"{'mask':14s} {'N ref':>6s} {'N':>6s} {'II':>3s} {'VV':>3s} {'II mm':>6s} {'VV mm':>6s} {'ref II':>6s} {'ref VV':>6s}  status"
    lines = [head]
    for r in rows:
        if r.get("actual") is None:
            lines.append(f"{r['mask']:14s} {r['expected']!s:>6s} {'-':>6s}  ERROR {r['error']}")
            continue
        lines.append(
            f"{r['mask']:14s} {r['expected']!s:>6s} {r['actual']:6d} {r['ii_electrodes']:3d} "
            f"{r['vv_electrodes']:3d} {r['mean_ii_mm']:6.2f} {r['mean_vv_mm']:6.2f} "
            f"{r['ref_ii_mm'] if r['ref_ii_mm'] is not None else float('nan'):6.2f} "
            f"{r['ref_vv_mm'] if r['ref_vv_mm'] is not None else float('nan'):6.2f}  "
            f"{'ok' if r['ok'] else 'MISMATCH ' + r['error']}")
    return "\n".join(lines)


def write_stage_reports(pl: Pipeline, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pl.config
    dump_json({"config": {k: v for k, v in cfg.to_dict().items() if k != "workers"}, "n_samples": len(pl.y),
               "n_patients": len(set(pl._patient_ids)),
               "removed_by_completeness_gate": pl.n_removed_by_gate,
               "unusable_samples": pl.prepared.unusable,
               "class_counts": {str(c): int(np.sum(pl.y == i)) for i, c in enumerate(pl.task.classes)},
               "frequency_grid_hz": list(pl.prepared.grid.values)}, out / "run.json")
    if "baseline" in pl.results:
        st = pl.results["baseline"]["stage"]
        dump_json(st, out / "baseline.json")
        write_csv(out / "baseline.csv", ["model", "auc_mean", "auc_ci_low", "auc_ci_high", "accuracy",
                                         "f1", "precision", "recall", "n_input"],
                  [[m, r["summary"]["auc"].get("mean"), r["summary"]["auc"].get("ci_low"),
                    r["summary"]["auc"].get("ci_high"), r["summary"]["accuracy"].get("mean"),
                    r["summary"]["f1"].get("mean"), r["summary"]["precision"].get("mean"),
                    r["summary"]["recall"].get("mean"), r["n_input"]]
                   for m, r in sorted(st["results"].items())])
    if "frequency" in pl.results:
        st = pl.results["frequency"]["stage"]
        dump_json(st, out / "frequency_sweep.json")
        dump_json(st["composite_ranking"], out / "rankings.json")
        write_csv(out / "auc_vs_ft.csv", ["f_t", "n_input", "auc_mean", "auc_ci_low", "auc_ci_high",
                                          "t", "p", "significant"],
                  [[r["f_t"], r["n_input"], r["summary"]["auc"].get("mean"),
                    r["summary"]["auc"].get("ci_low"), r["summary"]["auc"].get("ci_high"),
                    r["vs_baseline"]["t"], r["vs_baseline"]["p"], int(r["vs_baseline"]["significant"])]
                   for r in st["results"]])
    if "iivv" in pl.results:
        st = pl.results["iivv"]["stage"]
        dump_json(st, out / "iivv_sweep.json")
        write_csv(out / "iivv_sweep.csv", ["mask", "n_iivv", "n_input", "auc_mean", "auc_ci_low",
                                           "auc_ci_high", "t", "p", "significant"],
                  [[r["mask"], r["n_iivv"], r["n_input"], r["summary"]["auc"].get("mean"),
                    r["summary"]["auc"].get("ci_low"), r["summary"]["auc"].get("ci_high"),
                    r["vs_baseline"]["t"], r["vs_baseline"]["p"], int(r["vs_baseline"]["significant"])]
                   for r in st["results"]])
    if "tuning" in pl.results:
        st = pl.results["tuning"]["stage"]
        dump_json(st, out / "tuning.json")
        dump_json(st["winners"], out / "winners.json")
        rows = []
        for model, tr in sorted(st["trace"].items()):
            for r in tr:
                rows.append([model, r["pattern"], r["f_t"], json.dumps(r["params"], sort_keys=True),
                             r["n_input"], r["mean"], r["ci_half_width"]])
        write_csv(out / "tuning_trace.csv", ["model", "pattern", "f_t", "params", "n_input",
                                             f"{st['metric']}_mean", "ci_half_width"], rows)
    if "final" in pl.results:
        write_final_report(pl, out)
    return out


def write_final_report(pl: Pipeline, out: Path):
    fin = pl.results["final"]
    dump_json(fin, out / "final_report.json")
    classes = fin["classes"]
    rows = []
    for model, r in sorted(fin["models"].items()):
        p = r["pooled"]
        rows.append([model, r["pattern"], r["f_t"], r["n_input"], json.dumps(r["params"], sort_keys=True),
                     p["accuracy"], p["f1"], r["auc"], p["recall"], p["precision"]])
    write_csv(out / "final_summary.csv", ["model", "iivv_mask", "f_t", "n_input", "params", "accuracy", "f1",
                                    "auc", "recall", "precision"], rows)
    for model, r in sorted(fin["models"].items()):
        cm = np.asarray(r["pooled"]["confusion_matrix"])
        write_csv(out / f"confusion_{model}.csv", ["true\\pred"] + classes,
                  [[classes[i]] + [int(v) for v in cm[i]] for i in range(len(classes))])
        for key, curve in r["_roc"].items():
            if curve is None:
                continue
            name = "micro" if key == "micro" else classes[key]
            write_csv(out / f"roc_{model}_{name}.csv", ["fpr", "tpr", "threshold"],
                      [[float(a), float(b), float(c)] for a, b, c in
                       zip(curve.fpr, curve.tpr, curve.thresholds)])
        write_csv(out / f"oof_{model}.csv", ["sample_id", "true"] + [f"p_{c}" for c in classes],
                  [[pl.prepared.sample_ids[i], classes[pl.y[i]]] + [float(x) for x in row]
                   for i, row in zip(r["_idx"], r["_prob"])])


def run_pipeline(config: ExperimentConfig, out_dir=None, stages=STAGES, pipeline: Pipeline | None = None,
                 **kw) -> Pipeline:
    pl = pipeline or Pipeline(config, **kw)
    for s in stages:
        if s == "baseline":
            run_baseline(pl)
        elif s == "frequency":
            run_frequency_sweep(pl)
        elif s == "iivv":
            run_iivv_sweep(pl)
        elif s == "tuning":
            run_combination_tuning(pl)
        elif s == "final":
            run_final_evaluation(pl)
        else:
            raise ConfigError(f"unknown stage {s!r}")
    if out_dir is not None:
        write_stage_reports(pl, out_dir)
    return pl


def train_models(pl: Pipeline, out_dir, winners: dict | None = None) -> dict:
    """Fit each model on every gated task sample and save it with its feature recipe.

    The recipe (pattern indices, 1-based frequencies, z-score parameters)
    is written next to the binary model so that new spectra can be mapped
    onto the same input columns.
    """
    from .classifiers import save_model

    cfg = pl.config
    winners = winners or cfg.winners or {
        m: {"pattern": "All", "f_t": pl.n_freq, "params": baseline_params(m, cfg.baseline_params).to_dict()}
        for m in cfg.models}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    everyone = np.arange(len(pl.y))
    summary = {}
    for model in sorted(winners):
        w = winners[model]
        spec = w.get("pattern_spec")
        pattern = PatternSpec(**spec) if spec else _parse_pattern(w["pattern"])
        hp = HyperParams.from_dict(w["params"])
        f_t = int(w["f_t"])
        if pattern.kind == "mask":
            pidx, thr = pl.mask_indices(pattern.name), None
        else:
            pidx, thr = pl.zthr_indices(pattern, everyone)
        if f_t >= pl.n_freq:
            fidx = np.arange(pl.n_freq)
        else:
            fidx = np.asarray(select_top_frequencies(pl.ranking("train", 0, 0, everyone), f_t))
        z = pl.prepared.zmag[:, pidx][:, :, fidx].reshape(len(everyone), -1)
        col_f = np.tile(fidx, pidx.size)
        zp = fit_zscore(z, col_f, cfg.filter_config().zscore_mode)
        fitted = clf.fit(apply_zscore(z, zp), pl.y, hp, subseed(cfg.seed, "train-model"))
        save_model(fitted, out / f"model_{model}.imsm")
        recipe = {"model": model, "params": hp.to_dict(), "pattern": pattern.label(),
                  "pattern_indices": pidx.tolist(), "threshold_ohm": thr,
                  "frequencies": [int(i) + 1 for i in fidx], "n_input": int(pidx.size * fidx.size),
                  "zscore": {"mode": zp.mode, "groups": zp.groups.tolist(),
                             "mean": zp.mean.tolist(), "std": zp.std.tolist()},
                  "classes": [str(c) for c in pl.task.classes], "n_train": int(len(everyone)),
                  "converged": bool(fitted.converged)}
        dump_json(recipe, out / f"model_{model}.json")
        summary[model] = {k: recipe[k] for k in ("pattern", "frequencies", "n_input", "converged")}
    return summary
