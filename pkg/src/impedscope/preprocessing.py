"""Burst filtering/averaging, completeness gating, |Z| conversion, z-scoring and
feature-matrix assembly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import (
    Category,
    DataError,
    Dataset,
    FrequencyGrid,
    SampleRecord,
    SpectralFrame,
    TaskSpec,
    frame_filename,
    frame_to_bytes,
    mask_filename,
    mask_to_bytes,
    _dump_json,
)

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class FilterConfig:
    """Acceptance limits for raw bursts; the defaults reject nothing.

    Voltages are reconstructed as ``|Z| * current_a``. ``max_burst_deviation``
    is the largest tolerated relative deviation of a burst's |Z| from the
    median over the bursts of the same test (any frequency).
    """

    voltage_floor: float = 0.0
    voltage_ceiling: float = math.inf
    current_a: float = 1e-4
    z_min: float = 0.0
    z_max: float = math.inf
    max_burst_deviation: float = math.inf
    completeness_threshold: float = 0.60
    zscore_mode: str = "per_frequency"

    def __post_init__(self):
        if not self.voltage_floor <= self.voltage_ceiling:
            raise ValueError("voltage_floor must not exceed voltage_ceiling")
        if not self.z_min <= self.z_max:
            raise ValueError("z_min must not exceed z_max")
        if not 0.0 <= self.completeness_threshold <= 1.0:
            raise ValueError("completeness_threshold must lie in [0, 1]")
        if self.max_burst_deviation < 0:
            raise ValueError("max_burst_deviation must be non-negative")
        if self.zscore_mode not in ("per_frequency", "per_column"):
            raise ValueError("zscore_mode must be 'per_frequency' or 'per_column'")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterConfig":
        d = dict(d or {})
        for k in ("voltage_ceiling", "z_max", "max_burst_deviation"):
            if d.get(k) is None and k in d:
                d[k] = math.inf
        return cls(**d)

    @classmethod
    def load(cls, path) -> "FilterConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in asdict(self).items()}


def impedance_magnitude(R, X):
    """|Z| = sqrt(R^2 + X^2), computed without intermediate overflow."""
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(X))):
        raise ValueError("impedance components must be finite")
    out = np.hypot(R, X)
    return out if out.ndim else float(out)


@dataclass
class CleanedSample:
    sample_id: str
    values: np.ndarray       # complex [pattern, freq], NaN where invalid
    valid: np.ndarray        # bool [pattern]
    completeness: float

    @property
    def usable(self) -> bool:
        return bool(self.valid.any())


def _burst_ok(z: np.ndarray, raw_valid: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    """Per (test, burst, pattern) acceptance from a [T, B, P, F] complex stack."""
    mag = np.abs(z)
    finite = np.isfinite(z.real) & np.isfinite(z.imag)
    ok = finite.all(axis=-1) & raw_valid[None, None, :]
    with np.errstate(invalid="ignore"):
        ok &= ((mag >= cfg.z_min) & (mag <= cfg.z_max)).all(axis=-1)
        volt = mag * cfg.current_a
        ok &= ((volt >= cfg.voltage_floor) & (volt <= cfg.voltage_ceiling)).all(axis=-1)
    if math.isfinite(cfg.max_burst_deviation):
        m = np.where(ok[..., None], mag, np.nan)
        with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(m, axis=1, keepdims=True)
            dev = np.abs(mag - med) / med
        bad = ~(dev <= cfg.max_burst_deviation).all(axis=-1)
        ok &= ~bad
    return ok


def filter_and_average(sample: SampleRecord, cfg: FilterConfig | None = None) -> CleanedSample:
    """Reduce the nine raw frames of a sample to one cleaned frame.

    Valid bursts are averaged within each test first, then the per-test
    means of tests with at least one surviving burst are averaged. A pattern
    is retained if it survives in at least one test; completeness is the
    retained fraction of all patterns.
    """
    cfg = cfg or FilterConfig()
    by_test = sample.frames_by_test()
    z = np.stack([np.stack([np.asarray(f.values) for f in t]) for t in by_test])
    raw_valid = np.zeros(z.shape[2], dtype=bool)
    for t in by_test:
        for f in t:
            raw_valid |= np.asarray(f.valid, dtype=bool)
    ok = _burst_ok(z, raw_valid, cfg)                       # [T, B, P]
    zs = np.where(ok[..., None], z, 0.0)
    nb = ok.sum(axis=1)                                     # [T, P]
    with np.errstate(invalid="ignore", divide="ignore"):
        test_mean = zs.sum(axis=1) / nb[..., None]          # [T, P, F]
    test_ok = nb > 0
    nt = test_ok.sum(axis=0)                                # [P]
    tm = np.where(test_ok[..., None], test_mean, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = tm.sum(axis=0) / nt[:, None]
    valid = nt > 0
    values[~valid] = complex(np.nan, np.nan)
    completeness = float(valid.sum()) / valid.size
    if not valid.any():
        logger.warning("sample %s: every pattern rejected; flagged unusable", sample.sample_id)
    return CleanedSample(sample.sample_id, values, valid, completeness)


def passes_gate(completeness: float, c_th: float) -> bool:
    """Keep a sample iff its removed-pattern fraction does not exceed ``c_th``."""
    return (1.0 - completeness) <= c_th + 1e-12


def apply_completeness_gate(items, c_th: float):
    """Filter samples (anything with a ``completeness`` attribute) by the gate.

    Accepts a ``Dataset``, a ``PreparedDataset`` or a plain sequence.
    """
    if not 0.0 <= c_th <= 1.0:
        raise ValueError("C_th must lie in [0, 1]")
    if isinstance(items, PreparedDataset):
        return items.take(np.flatnonzero([passes_gate(c, c_th) for c in items.completeness]))
    if isinstance(items, Dataset):
        missing = [s.sample_id for s in items.samples if s.completeness is None]
        if missing:
            raise DataError(f"completeness not computed for {missing[:3]}...")
        keep = [s for s in items.samples if passes_gate(s.completeness, c_th)]
        return Dataset(keep, items.grid, items.n_patterns, items.geometry, items.kind, dict(items.meta))
    return [s for s in items if passes_gate(s.completeness, c_th)]


# ---------------------------------------------------------------------------
# prepared (cleaned, magnitude) cohort
# ---------------------------------------------------------------------------

@dataclass
class PreparedDataset:
    """Cleaned |Z| cube ``zmag[sample, pattern, freq]`` (NaN where invalid)."""

    sample_ids: list[str]
    patient_ids: np.ndarray
    categories: list[Category]
    raw_pathology: list[str]
    zmag: np.ndarray
    valid: np.ndarray
    completeness: np.ndarray
    grid: FrequencyGrid
    unusable: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.sample_ids)

    @property
    def n_patterns(self) -> int:
        return self.zmag.shape[1]

    def take(self, idx) -> "PreparedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedDataset(
            [self.sample_ids[i] for i in idx],
            self.patient_ids[idx],
            [self.categories[i] for i in idx],
            [self.raw_pathology[i] for i in idx],
            self.zmag[idx],
            self.valid[idx],
            self.completeness[idx],
            self.grid,
            list(self.unusable),
        )

    def for_task(self, task: TaskSpec) -> tuple["PreparedDataset", np.ndarray]:
        y = task.encode(self.categories)
        idx = np.flatnonzero(y >= 0)
        return self.take(idx), y[idx]


def prepare(dataset: Dataset, cfg: FilterConfig | None = None, out_dir=None,
            progress=None) -> PreparedDataset:
    """Filter/average every sample and collect the |Z| cube.

    With ``out_dir`` the cleaned frames are also written in the dataset
    format (one test x one burst) together with ``completeness.csv``.
    Samples with no surviving pattern are dropped and listed as unusable.
    Cleaned input datasets (``kind == 'cleaned'``) are passed through.
    """
    cfg = cfg or FilterConfig()
    n, P, F = len(dataset), dataset.n_patterns, len(dataset.grid)
    zmag = np.full((n, P, F), np.nan)
    valid = np.zeros((n, P), dtype=bool)
    comp = np.zeros(n)
    keep, unusable, cleaned_records = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.samples):
        if dataset.kind == "cleaned":
            fr = s.frames[0]
            vals = np.array(fr.values)
            vmask = np.asarray(fr.valid, dtype=bool)
            vals[~vmask] = complex(np.nan, np.nan)
            cs = CleanedSample(s.sample_id, vals, vmask, float(vmask.mean()))
        else:
            cs = filter_and_average(s, cfg)
        if progress:
            progress(i, n, s.sample_id)
        if not cs.usable:
            unusable.append(s.sample_id)
            continue
        mag = np.abs(cs.values)
        zmag[i] = np.where(cs.valid[:, None], mag, np.nan)
        valid[i] = cs.valid
        comp[i] = cs.completeness
        keep.append(i)
        if out is not None:
            vals = np.where(cs.valid[:, None], cs.values, 0.0)
            (out / frame_filename(s.sample_id, 1, 1)).write_bytes(frame_to_bytes(vals))
            (out / mask_filename(s.sample_id)).write_bytes(mask_to_bytes(cs.valid))
        cleaned_records.append(SampleRecord(s.sample_id, s.patient_id, s.label,
                                            frame_source=lambda: [], n_tests=1, n_bursts=1,
                                            completeness=cs.completeness))
    keep = np.asarray(keep, dtype=np.int64)
    prepared = PreparedDataset(
        [dataset.samples[i].sample_id for i in keep],
        np.array([dataset.samples[i].patient_id for i in keep], dtype=object),
        [dataset.samples[i].label.category for i in keep],
        [dataset.samples[i].label.raw_pathology for i in keep],
        zmag[keep],
        valid[keep],
        comp[keep],
        dataset.grid,
        unusable,
    )
    if out is not None:
        cleaned = Dataset(cleaned_records, dataset.grid, P, dataset.geometry, "cleaned",
                          {**dataset.meta, "filter": cfg.to_dict(), "unusable": unusable})
        (out / "manifest.json").write_text(_dump_json(cleaned.to_manifest()))
        write_completeness_csv(out / "completeness.csv", prepared, cfg.completeness_threshold)
    return prepared


def write_completeness_csv(path, prepared: PreparedDataset, c_th: float):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "patient_id", "category", "completeness", "retained_patterns",
                    "passes_gate"])
        for i, sid in enumerate(prepared.sample_ids):
            w.writerow([sid, prepared.patient_ids[i], str(prepared.categories[i]),
                        repr(float(prepared.completeness[i])), int(prepared.valid[i].sum()),
                        int(passes_gate(prepared.completeness[i], c_th))])


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZScoreParams:
    """Location/scale per group (frequency, or column in per-column mode)."""

    groups: np.ndarray   # group id per column
    mean: np.ndarray     # per group
    std: np.ndarray      # per group, population convention
    mode: str = "per_frequency"


def fit_zscore(X_train: np.ndarray, column_freq: np.ndarray | None = None,
               mode: str = "per_frequency") -> ZScoreParams:
    """Training-only z-score parameters.

    Missing (NaN) training entries are treated as imputed at the training
    mean, so they add nothing to the variance numerator but do count in the
    population denominator. This makes the transformed training matrix
    exactly zero-mean and unit-std per group, imputed entries included.
    """
    X_train = np.asarray(X_train, dtype=float)
    if X_train.ndim != 2 or X_train.shape[0] == 0:
        raise ValueError("training matrix must be 2-D and non-empty")
    n, d = X_train.shape
    if mode == "per_column" or column_freq is None:
        groups = np.arange(d)
    elif mode == "per_frequency":
        groups = np.asarray(column_freq)
        if groups.shape != (d,):
            raise ValueError("column_freq must give one frequency per column")
    else:
        raise ValueError(f"unknown z-score mode {mode!r}")
    _, gid = np.unique(groups, return_inverse=True)
    g = gid.max() + 1
    obs = np.isfinite(X_train)
    Xz = np.where(obs, X_train, 0.0)
    cnt = np.bincount(gid, weights=obs.sum(axis=0), minlength=g)
    tot = np.bincount(gid, weights=Xz.sum(axis=0), minlength=g)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    dev = np.where(obs, X_train - mean[gid], 0.0)
    ss = np.bincount(gid, weights=(dev * dev).sum(axis=0), minlength=g)
    size = np.bincount(gid, minlength=g) * n
    std = np.sqrt(ss / size)
    return ZScoreParams(gid, mean, std, mode)


def apply_zscore(X: np.ndarray, params: ZScoreParams) -> np.ndarray:
    """Transform with fixed parameters; NaN -> 0 (training-mean imputation)."""
    X = np.asarray(X, dtype=float)
    mu = params.mean[params.groups]
    sd = params.std[params.groups]
    degenerate = sd < DEGENERATE_STD
    safe = np.where(degenerate, 1.0, sd)
    out = (X - mu) / safe
    out[:, degenerate] = 0.0
    out[~np.isfinite(out)] = 0.0
    return out


def zscore_per_frequency(X_train, X_apply=None, column_freq=None, mode: str = "per_frequency"):
    """Fit on ``X_train`` only and transform both matrices.

    Returns ``(Z_train, Z_apply, params)``; ``Z_apply`` is None when no
    second matrix is given.
    """
    params = fit_zscore(X_train, column_freq, mode)
    Zt = apply_zscore(X_train, params)
    Za = apply_zscore(X_apply, params) if X_apply is not None else None
    return Zt, Za, params


# ---------------------------------------------------------------------------
# feature assembly
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Rows = samples, columns = (pattern, frequency), pattern-major.

    ``X`` keeps NaN for invalid entries; imputation happens inside
    normalisation so it can use training-split statistics only.
    """

    X: np.ndarray
    column_pattern: np.ndarray
    column_freq: np.ndarray
    sample_ids: list[str]
    empty_samples: list[str] = field(default_factory=list)

    @property
    def n_input(self) -> int:
        return self.X.shape[1]

    def normalized(self, train_idx, test_idx=None, mode: str = "per_frequency"):
        Xtr = self.X[train_idx]
        Xte = self.X[test_idx] if test_idx is not None else None
        return zscore_per_frequency(Xtr, Xte, self.column_freq, mode)


def assemble_features(prepared: PreparedDataset, mask, frequency_subset: Sequence[int]) -> FeatureMatrix:
    """Select ``mask`` patterns x ``frequency_subset`` (0-based) columns.

    ``mask`` may be a ``MaskSet`` or an index array. Samples with no valid
    pattern inside the mask are reported in ``empty_samples``.
    """
    pidx = np.asarray(getattr(mask, "indices", mask), dtype=np.int64)
    fidx = np.asarray(sorted(set(int(f) for f in frequency_subset)), dtype=np.int64)
    if pidx.size == 0:
        raise ValueError("mask selects no patterns")
    if fidx.size == 0:
        raise ValueError("frequency subset is empty")
    if fidx.min() < 0 or fidx.max() >= len(prepared.grid):
        raise ValueError("frequency index out of range")
    n = len(prepared)
    if np.array_equal(pidx, np.arange(prepared.n_patterns)) and fidx.size == len(prepared.grid):
        X = prepared.zmag.reshape(n, -1).copy()
    else:
        X = prepared.zmag[:, pidx][:, :, fidx].reshape(n, -1)
    col_p = np.repeat(pidx, fidx.size)
    col_f = np.tile(fidx, pidx.size)
    empty = [prepared.sample_ids[i] for i in np.flatnonzero(~prepared.valid[:, pidx].any(axis=1))]
    if empty:
        logger.warning("%d samples have no valid pattern inside the mask", len(empty))
    return FeatureMatrix(X, col_p, col_f, list(prepared.sample_ids), empty)
