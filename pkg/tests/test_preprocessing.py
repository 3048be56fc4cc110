import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from impedscope.data_model import (
    Category,
    Dataset,
    FrequencyGrid,
    SampleRecord,
    SpectralFrame,
    TissueLabel,
    load_dataset,
)
from impedscope.geometry import build_geometric_mask
from impedscope.preprocessing import (
    FilterConfig,
    apply_completeness_gate,
    apply_zscore,
    assemble_features,
    filter_and_average,
    fit_zscore,
    impedance_magnitude,
    passes_gate,
    prepare,
    zscore_per_frequency,
)


def _sample(stack, valid=None, sid="S1"):
    """SampleRecord from a complex [T, B, P, F] stack."""
    T, B, P, _ = stack.shape
    valid = np.ones(P, bool) if valid is None else valid
    frames = [SpectralFrame(stack[t, b], valid) for t in range(T) for b in range(B)]
    return SampleRecord(sid, "P1", TissueLabel("healthy", Category.HEALTHY),
                        frame_source=lambda: frames, n_tests=T, n_bursts=B)


# -- magnitude --------------------------------------------------------------

def test_magnitude_basic():
    assert impedance_magnitude(3.0, 4.0) == 5.0
    np.testing.assert_allclose(impedance_magnitude([1e200, 0.0], [1e200, -2.0]),
                               [math.sqrt(2) * 1e200, 2.0])


def test_magnitude_rejects_nonfinite():
    with pytest.raises(ValueError):
        impedance_magnitude(np.nan, 1.0)


# -- filtering and averaging ------------------------------------------------

def test_average_without_rejection(rng):
    z = rng.random((3, 3, 4, 2)) + 1j * rng.random((3, 3, 4, 2))
    cs = filter_and_average(_sample(z))
    np.testing.assert_allclose(cs.values, z.mean(axis=(0, 1)))
    assert cs.completeness == 1.0 and cs.usable


def test_two_stage_average_weights_tests_equally():
    # test 1 loses two bursts; its single survivor must carry a full test's weight
    z = np.ones((3, 3, 1, 1), complex)
    z[0] = 10.0
    z[0, 1:] = 1e6
    cs = filter_and_average(_sample(z), FilterConfig(z_max=1e5))
    assert cs.values[0, 0] == pytest.approx((10 + 1 + 1) / 3)


def test_pattern_dropped_when_all_tests_fail():
    z = np.ones((3, 3, 4, 2), complex)
    z[:, :, 2] = 1e6
    cs = filter_and_average(_sample(z), FilterConfig(z_max=1e5))
    np.testing.assert_array_equal(cs.valid, [True, True, False, True])
    assert cs.completeness == 0.75
    assert np.all(np.isnan(cs.values[2]))


def test_voltage_window():
    z = np.full((1, 1, 3, 1), 100.0 + 0j)
    z[0, 0, 1] = 1.0          # 1 ohm * 0.1 mA = 0.1 mV, below the floor
    cs = filter_and_average(_sample(z), FilterConfig(voltage_floor=1e-3, current_a=1e-4))
    np.testing.assert_array_equal(cs.valid, [True, False, True])


def test_burst_deviation_rejects_outlier():
    z = np.ones((1, 3, 2, 1), complex)
    z[0, 2, 0] = 5.0
    cs = filter_and_average(_sample(z), FilterConfig(max_burst_deviation=0.5))
    assert cs.values[0, 0] == 1.0 and cs.valid.all()


def test_invalid_raw_patterns_and_unusable(caplog):
    z = np.ones((1, 1, 3, 2), complex)
    cs = filter_and_average(_sample(z, valid=np.array([True, False, True])))
    assert cs.completeness == pytest.approx(2 / 3)
    cs = filter_and_average(_sample(z, valid=np.zeros(3, bool)))
    assert not cs.usable and "unusable" in caplog.text


@pytest.mark.parametrize("kw", [dict(voltage_floor=2, voltage_ceiling=1), dict(z_min=5, z_max=1),
                                dict(completeness_threshold=1.5), dict(max_burst_deviation=-1),
                                dict(zscore_mode="global")])
def test_filter_config_validation(kw):
    with pytest.raises(ValueError):
        FilterConfig(**kw)


def test_filter_config_roundtrip():
    cfg = FilterConfig(z_max=1e4, completeness_threshold=0.3)
    back = FilterConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.voltage_ceiling == math.inf


# -- completeness gate ------------------------------------------------------

@pytest.mark.parametrize("completeness, c_th, keep", [
    (0.4, 0.6, True),     # removed fraction exactly at the threshold
    (0.39, 0.6, False),
    (1.0, 0.0, True),
    (0.999, 0.0, False),
    (0.0, 1.0, True),
])
def test_gate_boundary(completeness, c_th, keep):
    assert passes_gate(completeness, c_th) is keep


def test_gate_on_sequences_and_prepared(small_prepared):
    class Item:
        def __init__(self, c):
            self.completeness = c
    kept = apply_completeness_gate([Item(0.3), Item(0.5), Item(0.9)], 0.6)
    assert [k.completeness for k in kept] == [0.5, 0.9]
    assert len(apply_completeness_gate(small_prepared, 0.6)) == len(small_prepared)
    with pytest.raises(ValueError):
        apply_completeness_gate([], 1.2)


# -- prepare ----------------------------------------------------------------

def test_prepare_shapes(small_cohort, small_prepared):
    assert small_prepared.zmag.shape == (len(small_cohort), 7728, 31)
    assert small_prepared.unusable == []
    assert np.all(small_prepared.zmag[small_prepared.valid] > 0)


def test_prepare_writes_cleaned_dataset(tmp_path, small_cohort, small_prepared):
    ds = small_cohort.subset([s.sample_id for s in small_cohort.samples[:2]])
    prep = prepare(ds, out_dir=tmp_path)
    assert (tmp_path / "completeness.csv").read_text().count("\n") == 3
    cleaned = load_dataset(tmp_path)
    assert cleaned.kind == "cleaned" and cleaned.n_tests == 1
    again = prepare(cleaned)
    np.testing.assert_allclose(again.zmag, prep.zmag, rtol=1e-15)
    np.testing.assert_array_equal(again.valid, prep.valid)


# -- z-score ----------------------------------------------------------------

def _freq_matrix(rng, n=30, p=5, f=4, missing=0.2):
    X = rng.lognormal(7, 0.5, size=(n, p * f))
    X[rng.random(X.shape) < missing] = np.nan
    return X, np.tile(np.arange(f), p)


@pytest.mark.parametrize("seed", range(5))
def test_zscore_training_moments_exact(seed):
    X, cf = _freq_matrix(np.random.default_rng(seed))
    Z, _, _ = zscore_per_frequency(X, column_freq=cf)
    for f in np.unique(cf):
        block = Z[:, cf == f]
        assert abs(block.mean()) <= 1e-9
        assert abs(block.std() - 1) <= 1e-9


def test_zscore_matches_direct_formula_without_missing(rng):
    X, cf = _freq_matrix(rng, missing=0.0)
    Z, _, p = zscore_per_frequency(X, column_freq=cf)
    for f in np.unique(cf):
        v = X[:, cf == f]
        np.testing.assert_allclose(Z[:, cf == f], (v - v.mean()) / v.std(), rtol=1e-12)


def test_zscore_uses_training_statistics_only(rng):
    X, cf = _freq_matrix(rng, missing=0.0)
    _, Za, p = zscore_per_frequency(X[:20], X[20:], cf)
    _, Zb, _ = zscore_per_frequency(X[:20], X[20:] * 100, cf)
    assert not np.allclose(Za, Zb)
    np.testing.assert_allclose(Za, apply_zscore(X[20:], p))


def test_zscore_missing_and_degenerate():
    X = np.array([[1.0, 5.0, np.nan], [3.0, 5.0, 2.0]])
    params = fit_zscore(X, mode="per_column")
    Z = apply_zscore(np.array([[np.nan, 7.0, 4.0]]), params)
    assert Z[0, 0] == 0.0          # missing -> training mean
    assert Z[0, 1] == 0.0          # zero-variance column
    assert np.isfinite(Z).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_zscore_per_column_property(X):
    Z, _, p = zscore_per_frequency(X, mode="per_column")
    ok = p.std >= 1e-12
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-9)
    np.testing.assert_allclose(Z.std(axis=0)[ok], 1.0, atol=1e-9)
    assert np.all(Z[:, ~ok] == 0)


# -- feature assembly -------------------------------------------------------

@pytest.mark.parametrize("mask, f_t, width", [
    ("Skip1 far", 8, 1792),
    ("Skip1 far", 2, 448),
    ("Opp. medium", 3, 792),
    ("All", 31, 239568),
])
def test_feature_width(small_prepared, mask, f_t, width):
    fm = assemble_features(small_prepared, build_geometric_mask(mask), range(f_t))
    assert fm.n_input == width
    assert fm.X.shape == (len(small_prepared), width)


def test_feature_columns_are_pattern_major(small_prepared):
    m = build_geometric_mask("Skip1 far")
    fm = assemble_features(small_prepared, m, [4, 0, 9])
    np.testing.assert_array_equal(fm.column_freq[:3], [0, 4, 9])
    assert np.all(fm.column_pattern[:3] == m.indices[0])
    np.testing.assert_array_equal(fm.X[:, 1], small_prepared.zmag[:, m.indices[0], 4])


@pytest.mark.parametrize("mask, freqs", [([], [0]), ([0, 1], []), ([0], [31])])
def test_feature_assembly_errors(small_prepared, mask, freqs):
    with pytest.raises(ValueError):
        assemble_features(small_prepared, np.array(mask, dtype=int), freqs)


def test_empty_samples_reported():
    grid = FrequencyGrid((100.0, 200.0))
    z = np.ones((1, 1, 4, 2), complex)
    ds = Dataset([_sample(z, valid=np.array([True, True, False, False]), sid="A")], grid, 4)
    prep = prepare(ds)
    fm = assemble_features(prep, np.array([2, 3]), [0, 1])
    assert fm.empty_samples == ["A"]
