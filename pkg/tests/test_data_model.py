import json

import numpy as np
import pytest

from impedscope.data_model import (
    Category,
    DataError,
    FrequencyGrid,
    SpectralFrame,
    TaskSpec,
    frame_to_bytes,
    load_dataset,
    map_label,
    mask_to_bytes,
    read_frame,
    read_mask,
    save_dataset,
    task_counts,
)


# -- frequency grid ---------------------------------------------------------

def test_default_grid_endpoints():
    g = FrequencyGrid.default()
    assert len(g) == 31
    assert g.hz(1) == 100.0
    assert g.hz(31) == 100_000.0
    assert abs(g.hz(13) - 1584.9) / 1584.9 < 1e-3


def test_default_grid_is_log_spaced():
    f = FrequencyGrid.default().as_array()
    np.testing.assert_allclose(np.diff(np.log10(f)), 0.1, atol=1e-12)


@pytest.mark.parametrize("bad", [(), (1.0, 1.0), (3.0, 2.0, 4.0)])
def test_grid_rejects_non_increasing(bad):
    with pytest.raises(DataError):
        FrequencyGrid(bad)


@pytest.mark.parametrize("i", [0, 32, -1])
def test_grid_index_is_one_based(i):
    with pytest.raises(IndexError):
        FrequencyGrid.default().hz(i)


# -- labels and tasks -------------------------------------------------------

@pytest.mark.parametrize("raw, cat", [
    ("Healthy", Category.HEALTHY),
    ("  OSCC ", Category.CANCER),
    ("Severe   Dysplasia", Category.HIGH_GRADE),
    ("mild_dysplasia", Category.NON_MALIGNANT),
    ("CIS", Category.HIGH_GRADE),
    ("inflammation", Category.OTHER),
])
def test_map_label(raw, cat):
    lab = map_label(raw)
    assert lab.category is cat
    assert lab.raw_pathology == raw


def test_unknown_label_quotes_value():
    with pytest.raises(DataError, match="glioblastoma"):
        map_label("glioblastoma")


def test_task_classes():
    t1, t2, t3 = (TaskSpec.get(i) for i in (1, 2, 3))
    assert t1.classes == (Category.HEALTHY, Category.CANCER) and t1.positive is Category.CANCER
    assert t2.n_classes == 3 and Category.HEALTHY not in t2.classes
    assert t3.n_classes == 4
    for t in (t1, t2, t3):
        assert Category.OTHER not in t.classes


def test_task_encode():
    cats = [Category.CANCER, Category.OTHER, Category.HEALTHY, Category.HIGH_GRADE]
    np.testing.assert_array_equal(TaskSpec.get(1).encode(cats), [1, -1, 0, -1])
    np.testing.assert_array_equal(TaskSpec.get(3).encode(cats), [1, -1, 0, 2])


def test_unknown_task():
    with pytest.raises(DataError):
        TaskSpec.get(4)


def test_frame_validation():
    with pytest.raises(DataError):
        SpectralFrame(np.zeros(5, complex), np.ones(5, bool))
    with pytest.raises(DataError):
        SpectralFrame(np.zeros((5, 2), complex), np.ones(4, bool))


# -- binary formats ---------------------------------------------------------

def test_frame_bytes_roundtrip(tmp_path, rng):
    v = rng.standard_normal((7, 3)) + 1j * rng.standard_normal((7, 3))
    p = tmp_path / "x.f64"
    p.write_bytes(frame_to_bytes(v))
    assert p.stat().st_size == 7 * 3 * 16
    np.testing.assert_array_equal(read_frame(p, 7, 3), v)
    np.testing.assert_array_equal(read_frame(p, 7, 3, mmap=False), v)
    # interleaved (R, X) little-endian doubles
    raw = np.fromfile(p, dtype="<f8")
    assert raw[0] == v[0, 0].real and raw[1] == v[0, 0].imag


def test_read_frame_size_mismatch(tmp_path):
    p = tmp_path / "x.f64"
    p.write_bytes(frame_to_bytes(np.zeros((6, 3), complex)))
    with pytest.raises(DataError, match="6 pattern rows"):
        read_frame(p, 7, 3)


@pytest.mark.parametrize("n", [1, 7, 8, 9, 7728])
def test_mask_bytes_roundtrip(tmp_path, n):
    valid = np.random.default_rng(n).random(n) < 0.5
    p = tmp_path / "m.mask"
    p.write_bytes(mask_to_bytes(valid))
    assert p.stat().st_size == (n + 7) // 8
    np.testing.assert_array_equal(read_mask(p, n), valid)


def test_mask_is_lsb_first(tmp_path):
    p = tmp_path / "m.mask"
    p.write_bytes(mask_to_bytes(np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 1], bool)))
    assert p.read_bytes() == bytes([0b00000001, 0b00000010])


# -- dataset roundtrip ------------------------------------------------------

def test_save_load_roundtrip(tmp_path, small_cohort):
    ds = small_cohort.subset([s.sample_id for s in small_cohort.samples[:3]])
    path = save_dataset(ds, tmp_path / "d")
    back = load_dataset(path)
    assert [s.sample_id for s in back.samples] == [s.sample_id for s in ds.samples]
    assert back.grid == ds.grid and back.n_patterns == ds.n_patterns
    for a, b in zip(ds.samples, back.samples):
        assert a.label == b.label
        fa, fb = a.frames[0], b.frames[0]
        np.testing.assert_array_equal(fa.values, fb.values)
        np.testing.assert_array_equal(fa.valid, fb.valid)
    # deterministic writer
    save_dataset(ds, tmp_path / "e")
    for f in (tmp_path / "d").iterdir():
        assert f.read_bytes() == (tmp_path / "e" / f.name).read_bytes()


def _small_manifest(tmp_path, small_cohort):
    ds = small_cohort.subset([small_cohort.samples[0].sample_id])
    path = save_dataset(ds, tmp_path)
    return path, json.loads(path.read_text())


@pytest.mark.parametrize("edit, message", [
    (lambda m: m.update(schema_version=99), "schema"),
    (lambda m: m["samples"][0].update(pathology="unicorn"), "unicorn"),
    (lambda m: m["samples"].append(dict(m["samples"][0])), "duplicate"),
    (lambda m: m.update(patients=["nobody"]), "patient"),
    (lambda m: m["samples"][0].update(frames=[]), "frame files"),
    (lambda m: m["samples"][0].update(mask="missing.mask"), "missing"),
    (lambda m: m.update(n_patterns=7727), "pattern rows"),
])
def test_manifest_validation(tmp_path, small_cohort, edit, message):
    path, m = _small_manifest(tmp_path, small_cohort)
    edit(m)
    path.write_text(json.dumps(m))
    with pytest.raises(DataError, match=message):
        load_dataset(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.json")


def test_for_task_and_counts(small_cohort):
    t = TaskSpec.get(2)
    sub = small_cohort.for_task(t)
    assert all(s.label.category is Category.CANCER for s in sub.samples)
    assert task_counts(small_cohort, TaskSpec.get(1)) == {"Healthy": 12, "Cancer": 12}
