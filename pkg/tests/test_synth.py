import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impedscope.data_model import Category
from impedscope.preprocessing import prepare
from impedscope.synth import (
    CohortSpec,
    DEFAULT_MODELS,
    TissueModel,
    cole_impedance,
    generate_cohort,
    load_cohort_config,
    with_seed,
)

QUIET = dict(patient_sigma=0.0, sample_sigma=0.0, pattern_sigma=0.0, noise_sigma=0.0)


def _spec(**kw):
    base = dict(patients_per_class={Category.HEALTHY: 2, Category.CANCER: 2}, samples_per_patient=2,
                seed=1, n_tests=1, n_bursts=1)
    base.update(kw)
    return CohortSpec(**base)


# -- Cole model -------------------------------------------------------------

def test_cole_limits():
    m = TissueModel(r0=2000, rinf=400, fc=1e4, alpha=0.7)
    z = cole_impedance(m, [1e-6, 1e4, 1e12])
    assert z[0].real == pytest.approx(2000, rel=1e-4)
    assert z[2].real == pytest.approx(400, rel=1e-3)
    assert z[1].imag < 0                        # capacitive


def test_cole_debye_case():
    z = cole_impedance(r0=10.0, rinf=0.0 + 1e-300, fc=1.0, alpha=1.0, f=np.array([1.0]))
    assert z[0] == pytest.approx(10.0 / (1 + 1j))


@settings(max_examples=40, deadline=None)
@given(st.floats(500, 5000), st.floats(0.05, 0.9), st.floats(1e3, 1e5), st.floats(0.3, 1.0))
def test_cole_magnitude_monotone(r0, ratio, fc, alpha):
    f = np.logspace(2, 5, 31)
    mag = np.abs(cole_impedance(r0=r0, rinf=ratio * r0, fc=fc, alpha=alpha, f=f))
    assert np.all(np.diff(mag) <= 1e-9 * mag[:-1])
    assert np.all((mag <= r0 + 1e-9) & (mag >= ratio * r0 - 1e-9))


def test_cole_rejects_nonpositive_frequency():
    with pytest.raises(ValueError):
        cole_impedance(DEFAULT_MODELS[Category.HEALTHY], [0.0, 1.0])


@pytest.mark.parametrize("kw", [dict(r0=100, rinf=200), dict(alpha=0.0), dict(alpha=1.5), dict(fc=0),
                                dict(r0_range=(300, 500)), dict(r0_range=(900, 800)),
                                dict(dropout=1.0), dict(noise_sigma=-0.1)])
def test_tissue_model_validation(kw):
    with pytest.raises(ValueError):
        TissueModel(**kw)


def test_tissue_model_dict_roundtrip():
    m = TissueModel(r0_range=(1000, 1200), contrast={"13": 0.5})
    assert m.contrast == {13: 0.5}
    assert TissueModel.from_dict(m.to_dict() | {"contrast": m.contrast}) == m


# -- cohort generation ------------------------------------------------------

def test_cohort_layout():
    ds = generate_cohort(_spec())
    assert len(ds) == 8 and ds.patients == ["P001", "P002", "P003", "P004"]
    assert ds.n_patterns == 7728 and len(ds.grid) == 31
    cats = [s.label.category for s in ds.samples]
    assert cats == [Category.HEALTHY] * 4 + [Category.CANCER] * 4
    assert ds.samples[0].label.raw_pathology == "healthy"
    assert ds.meta["synthetic"] is True


def test_frames_regenerate_identically():
    ds = generate_cohort(_spec())
    a = ds.samples[5].frames[0].values
    _ = [s.frames for s in ds.samples[::-1]]          # different access order
    np.testing.assert_array_equal(ds.samples[5].frames[0].values, a)
    other = generate_cohort(_spec())
    np.testing.assert_array_equal(other.samples[5].frames[0].values, a)


def test_seed_changes_data():
    a = generate_cohort(_spec()).samples[0].frames[0].values
    b = generate_cohort(with_seed(_spec(), 2)).samples[0].frames[0].values
    assert not np.allclose(a, b)


def test_noise_free_cohort_follows_cole_times_geometry():
    m = TissueModel(r0=2000, rinf=400, fc=2e4, alpha=0.8, **QUIET)
    ds = generate_cohort(_spec(), {Category.HEALTHY: m, Category.CANCER: m})
    v = ds.samples[0].frames[0].values
    ratio = v / v[0]
    # every pattern carries the same spectrum shape up to a real positive factor
    np.testing.assert_allclose(ratio, ratio[:, :1] * np.ones((1, 31)), rtol=1e-12)
    cole = cole_impedance(m, ds.grid.as_array())
    np.testing.assert_allclose(v[0] / v[0, 0], cole / cole[0], rtol=1e-12)


def test_disjoint_r0_ranges_separate_classes():
    models = {Category.HEALTHY: TissueModel(r0_range=(1800, 2200), **QUIET),
              Category.CANCER: TissueModel(r0_range=(1000, 1400), **QUIET)}
    prep = prepare(generate_cohort(_spec(), models))
    low = np.nanmean(prep.zmag[:, :, 0], axis=1)
    healthy = np.array([c is Category.HEALTHY for c in prep.categories])
    assert low[healthy].min() > low[~healthy].max()


def test_contrast_only_at_requested_indices():
    base = TissueModel(**QUIET)
    boosted = TissueModel(contrast={1: 0.5, 13: -0.3}, **QUIET)
    a = generate_cohort(_spec(), {Category.HEALTHY: base, Category.CANCER: base})
    b = generate_cohort(_spec(), {Category.HEALTHY: boosted, Category.CANCER: boosted})
    r = np.abs(b.samples[0].frames[0].values[0]) / np.abs(a.samples[0].frames[0].values[0])
    expected = np.ones(31)
    expected[0], expected[12] = np.exp(0.5), np.exp(-0.3)
    np.testing.assert_allclose(r, expected, rtol=1e-12)


def test_contrast_index_range():
    ds = generate_cohort(_spec(), {Category.HEALTHY: TissueModel(contrast={32: 1.0})})
    with pytest.raises(ValueError):
        ds.samples[0].frames


@pytest.mark.parametrize("p", [0.0, 0.3])
def test_dropout_rate(p):
    ds = generate_cohort(_spec(), {Category.HEALTHY: TissueModel(dropout=p)})
    fr = ds.samples[0].frames[0]
    assert abs((1 - fr.valid.mean()) - p) < 0.03
    assert np.all(fr.values[~fr.valid] == 0)


def test_nine_frames_by_default():
    spec = CohortSpec({Category.CANCER: 1}, samples_per_patient=1)
    s = generate_cohort(spec).samples[0]
    assert len(s.frames) == 9 and len(s.frames_by_test()) == 3


def test_spec_validation():
    with pytest.raises(ValueError):
        CohortSpec({Category.HEALTHY: -1})
    with pytest.raises(ValueError):
        CohortSpec({"Unicorn": 1})


def test_load_cohort_config():
    spec, models, names = load_cohort_config({
        "cohort": {"patients_per_class": {"Healthy": 3}, "seed": 9},
        "models": {"Healthy": {"r0_range": [1800, 2200]}},
        "pathology": {"Healthy": "normal"},
    })
    assert spec.patients_per_class == {Category.HEALTHY: 3} and spec.seed == 9
    assert models[Category.HEALTHY].r0_range == (1800.0, 2200.0)
    assert models[Category.HEALTHY].fc == DEFAULT_MODELS[Category.HEALTHY].fc
    ds = generate_cohort(spec, models, pathology=names)
    assert ds.samples[0].label.raw_pathology == "normal"
