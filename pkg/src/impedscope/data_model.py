"""Domain types, manifest handling and the on-disk frame format.

Layout of a dataset directory::

    manifest.json               human-readable metadata (see ``Dataset.to_manifest``)
    <sample>_<test>_<burst>.f64 little-endian float64, row-major [pattern][freq][R, X]
    <sample>.mask               one bit per pattern, LSB-first; 1 = measured/valid

Frames are never held in memory longer than needed: on-disk samples are
read through ``np.memmap`` and synthetic samples regenerate their frames on
demand from a seeded generator.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_TESTS = 3
N_BURSTS = 3


class DataError(ValueError):
    """Raised for malformed manifests, missing files or dimension mismatches."""


class Category(str, enum.Enum):
    HEALTHY = "Healthy"
    CANCER = "Cancer"
    HIGH_GRADE = "HighGradeDysplasia"
    NON_MALIGNANT = "NonMalignant"
    OTHER = "Other"

    def __str__(self):
        return self.value


# ---------------------------------------------------------------------------
# frequency grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing measurement frequencies in Hz.

    User-facing indices are 1-based (``label(1)`` is the lowest frequency).
    """

    values: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if len(v) == 0:
            raise DataError("frequency grid is empty")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise DataError("frequency grid must be strictly increasing")
        object.__setattr__(self, "values", v)

    @classmethod
    def default(cls, n: int = 31, f_min: float = 100.0, decades: float = 3.0) -> "FrequencyGrid":
        """Log grid f_k = f_min * 10**(decades*(k-1)/(n-1)), k = 1..n."""
        k = np.arange(n)
        vals = f_min * 10.0 ** (decades * k / (n - 1))
        vals[0], vals[-1] = f_min, f_min * 10.0 ** decades
        return cls(tuple(vals.tolist()))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def hz(self, index_1based: int) -> float:
        if not 1 <= index_1based <= len(self):
            raise IndexError(f"frequency index {index_1based} outside 1..{len(self)}")
        return self.values[index_1based - 1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


# ---------------------------------------------------------------------------
# labels and tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TissueLabel:
    raw_pathology: str
    category: Category


def _normalise(raw: str) -> str:
    return " ".join(raw.strip().lower().replace("_", " ").split())


def load_vocabulary(path=None) -> dict[str, Category]:
    if path is None:
        text = resources.files("impedscope.data").joinpath("pathology.json").read_text()
    else:
        text = Path(path).read_text()
    cfg = json.loads(text)
    return {_normalise(k): Category(v) for k, v in cfg["vocabulary"].items()}


_VOCAB: dict[str, Category] | None = None


def map_label(raw_pathology: str, vocabulary: dict[str, Category] | None = None) -> TissueLabel:
    """Map a pathology string onto one of the five tissue categories.

    Matching is case- and whitespace-insensitive. Unknown strings raise
    ``DataError`` quoting the offending value.
    """
    global _VOCAB
    if vocabulary is None:
        if _VOCAB is None:
            _VOCAB = load_vocabulary()
        vocabulary = _VOCAB
    if not isinstance(raw_pathology, str):
        raise DataError(f"pathology must be a string, got {raw_pathology!r}")
    key = _normalise(raw_pathology)
    if key not in vocabulary:
        raise DataError(f"unknown pathology {raw_pathology!r}")
    return TissueLabel(raw_pathology, vocabulary[key])


@dataclass(frozen=True)
class TaskSpec:
    """Classification task: ordered class list and the positive class (binary only)."""

    task_id: int
    classes: tuple[Category, ...]
    positive: Category | None = None

    @classmethod
    def get(cls, task_id: int) -> "TaskSpec":
        try:
            return _TASKS[int(task_id)]
        except KeyError:
            raise DataError(f"unknown task {task_id!r}; expected 1, 2 or 3") from None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, category: Category) -> int | None:
        try:
            return self.classes.index(Category(category))
        except ValueError:
            return None

    def encode(self, categories: Sequence) -> np.ndarray:
        """Class indices for the given categories (-1 for categories outside the task)."""
        out = np.full(len(categories), -1, dtype=np.int64)
        for i, c in enumerate(categories):
            j = self.class_index(c)
            if j is not None:
                out[i] = j
        return out


# Task 1 lists the negative class first so that class index 1 is the positive
_TASKS = {
    1: TaskSpec(1, (Category.HEALTHY, Category.CANCER), positive=Category.CANCER),
    2: TaskSpec(2, (Category.CANCER, Category.HIGH_GRADE, Category.NON_MALIGNANT)),
    3: TaskSpec(3, (Category.HEALTHY, Category.CANCER, Category.HIGH_GRADE, Category.NON_MALIGNANT)),
}


# ---------------------------------------------------------------------------
# frames and samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralFrame:
    """Complex impedance [pattern, frequency] with a per-pattern validity flag."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError("frame values must be 2-D [pattern, frequency]")
        if self.valid.shape != (self.values.shape[0],):
            raise DataError("validity mask length must equal the pattern count")

    @property
    def shape(self):
        return self.values.shape


FrameSource = Callable[[], list]


@dataclass
class SampleRecord:
    """One tissue site.

    ``frames`` is materialised lazily through ``frame_source`` so a cohort of
    hundreds of samples never holds every raw frame in memory at once.
    ``completeness`` stays ``None`` until filtering has run.
    """

    sample_id: str
    patient_id: str
    label: TissueLabel
    frame_source: FrameSource = field(repr=False)
    n_tests: int = N_TESTS
    n_bursts: int = N_BURSTS
    completeness: float | None = None

    @property
    def frames(self) -> list[SpectralFrame]:
        frames = self.frame_source()
        if len(frames) != self.n_tests * self.n_bursts:
            raise DataError(f"sample {self.sample_id}: expected "
                            f"{self.n_tests * self.n_bursts} frames, got {len(frames)}")
        return frames

    def frames_by_test(self) -> list[list[SpectralFrame]]:
        fr = self.frames
        b = self.n_bursts
        return [fr[t * b:(t + 1) * b] for t in range(self.n_tests)]


@dataclass
class Dataset:
    samples: list[SampleRecord]
    grid: FrequencyGrid
    n_patterns: int
    geometry: str = "default"
    kind: str = "raw"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.samples})

    @property
    def n_tests(self) -> int:
        return self.samples[0].n_tests if self.samples else (1 if self.kind == "cleaned" else N_TESTS)

    @property
    def n_bursts(self) -> int:
        return self.samples[0].n_bursts if self.samples else (1 if self.kind == "cleaned" else N_BURSTS)

    def for_task(self, task: TaskSpec) -> "Dataset":
        """Subset whose categories belong to the task; ``Other`` never survives."""
        keep = [s for s in self.samples if task.class_index(s.label.category) is not None]
        return Dataset(keep, self.grid, self.n_patterns, self.geometry, self.kind, dict(self.meta))

    def subset(self, sample_ids) -> "Dataset":
        ids = set(sample_ids)
        keep = [s for s in self.samples if s.sample_id in ids]
        return Dataset(keep, self.grid, self.n_patterns, self.geometry, self.kind, dict(self.meta))

    def to_manifest(self) -> dict:
        samples = []
        for s in self.samples:
            entry = {
                "sample_id": s.sample_id,
                "patient_id": s.patient_id,
                "pathology": s.label.raw_pathology,
                "frames": [frame_filename(s.sample_id, t + 1, b + 1)
                           for t in range(s.n_tests) for b in range(s.n_bursts)],
                "mask": mask_filename(s.sample_id),
            }
            if s.completeness is not None:
                entry["completeness"] = float(s.completeness)
            samples.append(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "frequency_grid_hz": list(self.grid.values),
            "geometry": self.geometry,
            "n_patterns": self.n_patterns,
            "n_tests": self.n_tests,
            "n_bursts": self.n_bursts,
            "patients": self.patients,
            "samples": samples,
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------

def frame_filename(sample_id: str, test: int, burst: int) -> str:
    return f"{sample_id}_{test}_{burst}.f64"


def mask_filename(sample_id: str) -> str:
    return f"{sample_id}.mask"


def frame_to_bytes(values: np.ndarray) -> bytes:
    v = np.ascontiguousarray(values, dtype=np.complex128)
    out = np.empty(v.shape + (2,), dtype="<f8")
    out[..., 0] = v.real
    out[..., 1] = v.imag
    return out.tobytes()


def read_frame(path, n_patterns: int, n_freq: int, mmap: bool = True) -> np.ndarray:
    """Complex [pattern, frequency] view of a frame file."""
    path = Path(path)
    expected = n_patterns * n_freq * 16
    size = path.stat().st_size
    if size != expected:
        rows = size / (n_freq * 16)
        raise DataError(f"{path.name}: {size} bytes ({rows:g} pattern rows), expected "
                        f"{n_patterns} x {n_freq} frame ({expected} bytes)")
    if mmap:
        raw = np.memmap(path, dtype="<f8", mode="r", shape=(n_patterns, n_freq, 2))
    else:
        raw = np.fromfile(path, dtype="<f8").reshape(n_patterns, n_freq, 2)
    return raw.view("<c16")[..., 0]


def mask_to_bytes(valid: np.ndarray) -> bytes:
    return np.packbits(np.asarray(valid, dtype=bool), bitorder="little").tobytes()


def read_mask(path, n_patterns: int) -> np.ndarray:
    path = Path(path)
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != (n_patterns + 7) // 8:
        raise DataError(f"{path.name}: {data.size} bytes, expected {(n_patterns + 7) // 8} "
                        f"for {n_patterns} patterns")
    return np.unpackbits(data, bitorder="little")[:n_patterns].astype(bool)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write frames, masks and ``manifest.json``; returns the manifest path.

    Writing is deterministic: identical datasets produce identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_freq = len(dataset.grid)
    for s in dataset.samples:
        frames = s.frames
        for i, fr in enumerate(frames):
            if fr.values.shape != (dataset.n_patterns, n_freq):
                raise DataError(f"sample {s.sample_id}: frame shape {fr.values.shape}")
            t, b = divmod(i, s.n_bursts)
            (out / frame_filename(s.sample_id, t + 1, b + 1)).write_bytes(frame_to_bytes(fr.values))
        # validity is stored once per sample: a pattern is valid if valid in any frame
        valid = np.zeros(dataset.n_patterns, dtype=bool)
        for fr in frames:
            valid |= fr.valid
        (out / mask_filename(s.sample_id)).write_bytes(mask_to_bytes(valid))
    path = out / "manifest.json"
    path.write_text(_dump_json(dataset.to_manifest()))
    return path


def _disk_source(paths, mask_path, n_patterns, n_freq):
    def load():
        valid = read_mask(mask_path, n_patterns)
        return [SpectralFrame(read_frame(p, n_patterns, n_freq), valid) for p in paths]
    return load


def load_dataset(manifest_path, vocabulary: dict | None = None) -> Dataset:
    """Parse a manifest and attach lazily-read frames to every sample.

    File existence and byte sizes are checked eagerly so dimension problems
    surface at load time rather than mid-pipeline.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if m.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema version {m.get('schema_version')!r}")
    root = manifest_path.parent
    grid = FrequencyGrid(tuple(m["frequency_grid_hz"]))
    n_pat = int(m["n_patterns"])
    n_tests, n_bursts = int(m.get("n_tests", N_TESTS)), int(m.get("n_bursts", N_BURSTS))
    declared = set(m.get("patients", []))
    samples = []
    seen = set()
    for e in m.get("samples", []):
        sid = e["sample_id"]
        if sid in seen:
            raise DataError(f"duplicate sample id {sid!r}")
        seen.add(sid)
        if declared and e["patient_id"] not in declared:
            raise DataError(f"sample {sid}: patient {e['patient_id']!r} not in patient list")
        label = map_label(e["pathology"], vocabulary)
        paths = [root / p for p in e["frames"]]
        if len(paths) != n_tests * n_bursts:
            raise DataError(f"sample {sid}: {len(paths)} frame files, expected {n_tests * n_bursts}")
        mask_path = root / e["mask"]
        for p in paths + [mask_path]:
            if not p.exists():
                raise DataError(f"sample {sid}: missing file {p.name}")
        for p in paths:
            size = p.stat().st_size
            if size != n_pat * len(grid) * 16:
                rows = size / (len(grid) * 16)
                raise DataError(f"sample {sid}: {p.name} holds {rows:g} pattern rows, "
                                f"expected {n_pat}")
        read_mask(mask_path, n_pat)
        samples.append(SampleRecord(
            sample_id=sid,
            patient_id=e["patient_id"],
            label=label,
            frame_source=_disk_source(paths, mask_path, n_pat, len(grid)),
            n_tests=n_tests,
            n_bursts=n_bursts,
            completeness=e.get("completeness"),
        ))
    used = {s.patient_id for s in samples}
    if declared and not used <= declared:
        raise DataError("manifest patient list inconsistent with samples")
    return Dataset(samples, grid, n_pat, m.get("geometry", "default"), m.get("kind", "raw"),
                   dict(m.get("meta", {})))


def task_counts(dataset: Dataset, task: TaskSpec) -> dict[str, int]:
    counts = {str(c): 0 for c in task.classes}
    for s in dataset.samples:
        if task.class_index(s.label.category) is not None:
            counts[str(s.label.category)] += 1
    return counts


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
