"""Synthetic, patient-grouped EIS cohorts from a single-dispersion Cole model.

Every sample's |Z| spectra are built as::

    Z[p, f] = Cole(R0, Rinf, fc, alpha; f) * g_p * c_p * s_p,s * s_s * k_s(f)

with ``g_p`` the geometric factor (VV distance / mean VV distance),
``c_p`` a cohort-fixed pattern factor, ``s_p,s`` per-sample pattern jitter,
``s_s`` a per-sample scale and ``k_s(f)`` optional frequency-contrast
factors. Patient-level lognormal variation perturbs R0, Rinf and fc. Each
of the nine frames adds complex burst noise; seeded dropout invalidates
whole patterns per sample.

All values are synthetic. They are not clinical truth.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import (
    Category,
    Dataset,
    FrequencyGrid,
    SampleRecord,
    SpectralFrame,
    TissueLabel,
    N_BURSTS,
    N_TESTS,
)
from .geometry import ElectrodeArray, enumerate_all

DEFAULT_PATHOLOGY = {
    Category.HEALTHY: "healthy",
    Category.CANCER: "OSCC",
    Category.HIGH_GRADE: "severe dysplasia",
    Category.NON_MALIGNANT: "mild dysplasia",
    Category.OTHER: "other",
}


@dataclass(frozen=True)
class TissueModel:
    """Cole parameters and variation levels for one tissue class.

    ``r0_range`` (ohm, low/high) replaces lognormal patient variation of R0
    with a uniform draw, which allows strictly disjoint class ranges.
    ``contrast`` maps 1-based frequency indices to log-offsets applied to
    |Z| at those frequencies; ``contrast_jitter`` adds independent
    per-(sample, frequency) lognormal spread at the same indices.
    """

    r0: float = 2000.0
    rinf: float = 400.0
    fc: float = 20e3
    alpha: float = 0.8
    r0_range: tuple[float, float] | None = None
    patient_sigma: float = 0.10
    sample_sigma: float = 0.05
    pattern_sigma: float = 0.05
    noise_sigma: float = 0.01
    dropout: float = 0.0
    contrast: dict = field(default_factory=dict)
    contrast_jitter: float = 0.0

    def __post_init__(self):
        if not self.r0 > self.rinf > 0:
            raise ValueError("need r0 > rinf > 0")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.fc <= 0:
            raise ValueError("fc must be positive")
        if self.r0_range is not None:
            lo, hi = self.r0_range
            if not hi >= lo > self.rinf:
                raise ValueError("r0_range must satisfy rinf < low <= high")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        for s in ("patient_sigma", "sample_sigma", "pattern_sigma", "noise_sigma", "contrast_jitter"):
            if getattr(self, s) < 0:
                raise ValueError(f"{s} must be non-negative")
        object.__setattr__(self, "contrast", {int(k): float(v) for k, v in dict(self.contrast).items()})
        if self.r0_range is not None:
            object.__setattr__(self, "r0_range", tuple(float(x) for x in self.r0_range))

    @classmethod
    def from_dict(cls, d: dict) -> "TissueModel":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrast"] = {str(k): v for k, v in sorted(self.contrast.items())}
        d["r0_range"] = list(self.r0_range) if self.r0_range is not None else None
        return d


DEFAULT_MODELS = {
    Category.HEALTHY: TissueModel(r0=2000.0, rinf=420.0, fc=18e3, alpha=0.80),
    Category.NON_MALIGNANT: TissueModel(r0=1800.0, rinf=400.0, fc=20e3, alpha=0.78),
    Category.HIGH_GRADE: TissueModel(r0=1500.0, rinf=360.0, fc=24e3, alpha=0.76),
    Category.CANCER: TissueModel(r0=1200.0, rinf=320.0, fc=30e3, alpha=0.74),
    Category.OTHER: TissueModel(r0=1700.0, rinf=380.0, fc=22e3, alpha=0.77),
}


@dataclass(frozen=True)
class CohortSpec:
    patients_per_class: dict
    samples_per_patient: int = 2
    seed: int = 0
    n_freq: int = 31
    n_tests: int = N_TESTS
    n_bursts: int = N_BURSTS
    geometry: str = "default"

    def __post_init__(self):
        ppc = {Category(k): int(v) for k, v in dict(self.patients_per_class).items()}
        if any(v < 0 for v in ppc.values()):
            raise ValueError("patient counts must be non-negative")
        if self.samples_per_patient < 0:
            raise ValueError("samples_per_patient must be non-negative")
        object.__setattr__(self, "patients_per_class", ppc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patients_per_class"] = {str(k): v for k, v in self.patients_per_class.items()}
        return d


def cole_impedance(model: TissueModel | None = None, f=None, *, r0=None, rinf=None, fc=None, alpha=None):
    """Z(f) = Rinf + (R0 - Rinf) / (1 + (i f / fc)^alpha)."""
    if model is not None:
        r0 = model.r0 if r0 is None else r0
        rinf = model.rinf if rinf is None else rinf
        fc = model.fc if fc is None else fc
        alpha = model.alpha if alpha is None else alpha
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequencies must be positive")
    return rinf + (r0 - rinf) / (1.0 + (1j * f / fc) ** alpha)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                                        zlib.crc32(name.encode())]))


class _Generator:
    """Holds the cohort-fixed pieces and renders one sample's frames on demand."""

    def __init__(self, spec: CohortSpec, models: dict, array: ElectrodeArray):
        self.spec = spec
        self.models = models
        self.grid = FrequencyGrid.default(spec.n_freq)
        u = enumerate_all(array)
        self.n_patterns = len(u)
        vv = u.vv_distance
        self.geo = vv / vv.mean()
        sig = max((m.pattern_sigma for m in models.values()), default=0.0)
        rng = _stream(spec.seed, "cohort-patterns")
        self.pattern_z = rng.standard_normal(self.n_patterns)
        self.pattern_sigma = sig
        self._patients = {}

    def patient_params(self, patient_id: str, category: Category):
        key = (patient_id, category)
        if key not in self._patients:
            m = self.models[category]
            rng = _stream(self.spec.seed, f"patient:{patient_id}")
            z = rng.standard_normal(3)
            if m.r0_range is not None:
                r0 = rng.uniform(*m.r0_range)
            else:
                r0 = m.r0 * math.exp(m.patient_sigma * z[0])
            rinf = min(m.rinf * math.exp(m.patient_sigma * z[1]), 0.95 * r0)
            fc = m.fc * math.exp(m.patient_sigma * z[2])
            self._patients[key] = (r0, rinf, fc)
        return self._patients[key]

    def frames(self, sample_id: str, patient_id: str, category: Category) -> list[SpectralFrame]:
        m = self.models[category]
        r0, rinf, fc = self.patient_params(patient_id, category)
        rng = _stream(self.spec.seed, f"sample:{sample_id}")
        f = self.grid.as_array()
        F, P = f.size, self.n_patterns
        s_scale = math.exp(m.sample_sigma * rng.standard_normal())
        fc_s = fc * math.exp(m.sample_sigma * rng.standard_normal())
        base = cole_impedance(r0=r0, rinf=rinf, fc=fc_s, alpha=m.alpha, f=f) * s_scale
        if m.contrast:
            k = np.zeros(F)
            jit = rng.standard_normal(F)
            for idx, off in m.contrast.items():
                if not 1 <= idx <= F:
                    raise ValueError(f"contrast index {idx} outside 1..{F}")
                k[idx - 1] = off + m.contrast_jitter * jit[idx - 1]
            base = base * np.exp(k)
        pat = self.geo * np.exp(self.pattern_sigma * self.pattern_z
                                + m.pattern_sigma * rng.standard_normal(P))
        clean = pat[:, None] * base[None, :]
        valid = rng.random(P) >= m.dropout
        out = []
        for _ in range(self.spec.n_tests * self.spec.n_bursts):
            noise = rng.standard_normal((P, F)) + 1j * rng.standard_normal((P, F))
            v = clean * (1.0 + m.noise_sigma * noise)
            v[~valid] = 0.0
            out.append(SpectralFrame(v, valid))
        return out


def generate_cohort(spec: CohortSpec, tissue_models: dict | None = None,
                    array: ElectrodeArray | None = None, pathology: dict | None = None) -> Dataset:
    """Lazily-rendered synthetic cohort.

    Frames are regenerated from ``(seed, sample_id)`` whenever accessed, so
    the result is identical regardless of access order or parallelism.
    """
    models = dict(DEFAULT_MODELS)
    for k, v in (tissue_models or {}).items():
        models[Category(k)] = v if isinstance(v, TissueModel) else TissueModel.from_dict(v)
    names = dict(DEFAULT_PATHOLOGY)
    names.update({Category(k): v for k, v in (pathology or {}).items()})
    array = array or ElectrodeArray.default()
    gen = _Generator(spec, models, array)
    samples = []
    pid = 0
    for cat in Category:
        for _ in range(spec.patients_per_class.get(cat, 0)):
            pid += 1
            patient = f"P{pid:03d}"
            for j in range(spec.samples_per_patient):
                sid = f"{patient}_S{j + 1}"
                samples.append(SampleRecord(
                    sample_id=sid,
                    patient_id=patient,
                    label=TissueLabel(names[cat], cat),
                    frame_source=(lambda s=sid, p=patient, c=cat: gen.frames(s, p, c)),
                    n_tests=spec.n_tests,
                    n_bursts=spec.n_bursts,
                ))
    meta = {"synthetic": True, "cohort": spec.to_dict(),
            "models": {str(k): models[k].to_dict() for k in sorted(models, key=str)
                       if spec.patients_per_class.get(k, 0)}}
    return Dataset(samples, gen.grid, gen.n_patterns, spec.geometry, "raw", meta)


def load_cohort_config(path_or_dict) -> tuple[CohortSpec, dict, dict]:
    """Parse a cohort JSON: ``{"cohort": {...}, "models": {...}, "pathology": {...}}``."""
    if isinstance(path_or_dict, dict):
        cfg = path_or_dict
    else:
        cfg = json.loads(Path(path_or_dict).read_text())
    cohort = dict(cfg.get("cohort", cfg))
    cohort.pop("models", None)
    cohort.pop("pathology", None)
    spec = CohortSpec(**cohort)
    models = {}
    base = cfg.get("models", {})
    for k, v in base.items():
        start = DEFAULT_MODELS[Category(k)]
        models[Category(k)] = replace(start, **v) if isinstance(v, dict) else v
    return spec, models, cfg.get("pathology", {})


def with_seed(spec: CohortSpec, seed: int) -> CohortSpec:
    return replace(spec, seed=int(seed))
