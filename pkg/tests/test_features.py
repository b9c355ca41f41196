import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartmorph.errors import ConfigError, DataError
from heartmorph.features import (
    FEATURE_SUBSETS, KINDS, NAMED_SEGMENTS, ROIS, SEGMENT_LABELS, FeatureKind, FeatureMatrix,
    assemble_matrix, build_index, column_name, compose_roi, explicit_measurements, extract_features,
    parse_column, read_matrix_csv, resolve_subset, robust_stats, roi_spec, write_matrix_csv,
)
from heartmorph.supervoxel import SupervoxelMap
from heartmorph.volume import LabelVolume, Volume


def oracle_robust_stats(values):
    """Independent pure-Python version: sort, interpolate quartiles, fence, stdev."""
    xs = sorted(float(v) for v in values)
    n = len(xs)

    def quantile(q):
        pos = q * (n - 1)
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)

    median = statistics.median(xs)
    q1, q3 = quantile(0.25), quantile(0.75)
    iqr = q3 - q1
    kept = [x for x in xs if q1 - 1.5 * iqr <= x <= q3 + 1.5 * iqr]
    std = statistics.stdev(kept) if len(kept) > 1 else 0.0
    return median, std


def test_robust_stats_worked_example():
    med, std = robust_stats([1, 2, 3, 4, 100])
    assert med == 3
    assert std == pytest.approx(np.std([1, 2, 3, 4], ddof=1), abs=1e-15)


@pytest.mark.parametrize("values,expected", [([7.5] * 9, (7.5, 0.0)), ([5], (5, 0.0))])
def test_robust_stats_degenerate(values, expected):
    assert robust_stats(values) == expected


def test_robust_stats_empty_and_nonfinite():
    with pytest.raises(DataError):
        robust_stats([])
    with pytest.raises(DataError):
        robust_stats([1.0, np.inf])


def test_robust_stats_matches_oracle_100_instances():
    for seed in range(150):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 300))
        v = rng.standard_t(2, size=n) * rng.uniform(0.1, 100) + rng.uniform(-500, 500)
        med, std = robust_stats(v)
        omed, ostd = oracle_robust_stats(v)
        assert med == pytest.approx(omed, rel=1e-12, abs=1e-12)
        assert std == pytest.approx(ostd, rel=1e-9, abs=1e-12)


def test_robust_stats_external_filter():
    # the filter values decide which entries are kept
    values = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    filt = np.array([0.0, 0.0, 0.0, 0.0, 100.0])
    _, std = robust_stats(values, filter_by=filt)
    assert std == pytest.approx(np.std([1, 2, 3, 4], ddof=1))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=60))
def test_robust_std_never_exceeds_plain_std(values):
    _, r = robust_stats(values)
    assert r <= np.std(values, ddof=1) * (1 + 1e-9) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40),
       st.floats(-1e3, 1e3, allow_nan=False), st.randoms())
def test_median_permutation_and_shift(values, shift, random):
    med, _ = robust_stats(values)
    shuffled = list(values)
    random.shuffle(shuffled)
    assert robust_stats(shuffled)[0] == med
    assert robust_stats(np.asarray(values) + shift)[0] == pytest.approx(med + shift, abs=1e-9)


def _toy_segments():
    seg = np.zeros((10, 10, 10), dtype=np.int32)
    seg[1:9, 1:9, 1:9] = SEGMENT_LABELS["Other"]
    for i, name in enumerate(NAMED_SEGMENTS):
        seg[2 + i, 2:5, 2:5] = SEGMENT_LABELS[name]
    return LabelVolume(seg), LabelVolume((seg > 0).astype(np.int32))


def test_whole_heart_equals_heart_mask():
    seg, heart = _toy_segments()
    np.testing.assert_array_equal(compose_roi(seg, heart, ROIS["whole_heart"]).data, heart.data)


def test_single_regions_partition_the_heart():
    seg, heart = _toy_segments()
    total = np.zeros(seg.dims, dtype=int)
    for name in ("lv", "rv", "la", "ra", "myo", "aorta", "only_other"):
        total += compose_roi(seg, heart, ROIS[name]).data
    np.testing.assert_array_equal(total, heart.data)


def test_other_is_empty_when_named_segments_fill_heart():
    seg = LabelVolume(np.full((3, 3, 3), SEGMENT_LABELS["LV"], dtype=np.int32))
    heart = LabelVolume(np.ones((3, 3, 3), dtype=np.int32))
    assert compose_roi(seg, heart, ROIS["only_other"]).data.sum() == 0


def test_roi_names_and_errors():
    assert roi_spec("LV, RV, LA, RA").name == "lv_rv_la_ra"
    with pytest.raises(ConfigError, match="whole_heart"):
        roi_spec("left ventricle")


def _two_supervoxels():
    labels = np.zeros((10, 10, 10), dtype=np.int32)
    labels[:5] = 1
    labels[5:] = 2
    return SupervoxelMap.from_labels(LabelVolume(labels))


def test_min_voxel_threshold_49_vs_50():
    sv = _two_supervoxels()
    roi = np.zeros((10, 10, 10), dtype=np.int32)
    roi[0:5].flat[:49] = 1  # 49 voxels in supervoxel 1
    roi[5:].flat[:50] = 1  # 50 voxels in supervoxel 2
    idx = build_index(sv, LabelVolume(roi))
    assert list(idx.ids) == [2]
    assert list(idx.sizes()) == [50]


def test_supervoxel_outside_roi_absent():
    sv = _two_supervoxels()
    roi = np.zeros((10, 10, 10), dtype=np.int32)
    roi[5:] = 1
    assert list(build_index(sv, LabelVolume(roi)).ids) == [2]


def test_all_dropped_is_data_error():
    sv = _two_supervoxels()
    roi = np.zeros((10, 10, 10), dtype=np.int32)
    roi[0, 0, 0] = 1
    with pytest.raises(DataError):
        build_index(sv, LabelVolume(roi))


def test_constant_region_features():
    sv = _two_supervoxels()
    idx = build_index(sv, LabelVolume(np.ones((10, 10, 10), dtype=np.int32)))
    dens = np.where(sv.labels.data == 1, 40.0, -20.0)
    f = extract_features(Volume(dens), Volume(np.ones((10, 10, 10))), idx)
    np.testing.assert_array_equal(f, [[40.0, 1.0, 0.0, 0.0], [-20.0, 1.0, 0.0, 0.0]])


def test_features_match_per_supervoxel_oracle(rng):
    sv = _two_supervoxels()
    idx = build_index(sv, LabelVolume(np.ones((10, 10, 10), dtype=np.int32)))
    dens = rng.normal(0, 50, size=(10, 10, 10))
    jac = rng.lognormal(0, 0.1, size=(10, 10, 10))
    f = extract_features(Volume(dens), Volume(jac), idx)
    for row, lab in enumerate(idx.ids):
        m = sv.labels.data == lab
        np.testing.assert_allclose(f[row, [0, 2]], oracle_robust_stats(dens[m]), rtol=1e-10)
        np.testing.assert_allclose(f[row, [1, 3]], oracle_robust_stats(jac[m]), rtol=1e-10)


def test_explicit_measurements_units():
    seg = np.zeros((20, 20, 20), dtype=np.int32)
    for i, name in enumerate(NAMED_SEGMENTS):
        seg[i * 3:i * 3 + 2, :10, :10] = SEGMENT_LABELS[name]  # 200 voxels each
    dens = np.where(seg > 0, 100.0, -50.0)
    m = explicit_measurements(LabelVolume(seg, (1.0, 2.0, 2.5)), Volume(dens, (1.0, 2.0, 2.5)))
    assert m.volume_ml["LV"] == pytest.approx(200 * 5.0 / 1000)
    assert m.mean_density["Aorta"] == 100.0
    assert len(m.as_row()) == 12


def test_explicit_measurements_missing_segment():
    seg = np.zeros((4, 4, 4), dtype=np.int32)
    seg[0, 0, 0] = SEGMENT_LABELS["LV"]
    with pytest.raises(DataError, match="RV"):
        explicit_measurements(LabelVolume(seg), Volume(np.zeros((4, 4, 4))))


def test_assemble_matrix_order_and_subsets(rng):
    vecs = [rng.normal(size=(3, 4)) for _ in range(5)]
    fm = assemble_matrix([f"s{i}" for i in range(5)], vecs, [4, 7, 9])
    assert fm.values.shape == (5, 12)
    assert fm.columns[:5] == [(4, KINDS[0]), (4, KINDS[1]), (4, KINDS[2]), (4, KINDS[3]), (7, KINDS[0])]
    np.testing.assert_array_equal(fm.values[2, 4:8], vecs[2][1])
    one = assemble_matrix([f"s{i}" for i in range(5)], vecs, [4, 7, 9], "median_density")
    assert one.values.shape == (5, 3)
    assert all(c[1] is FeatureKind.MEDIAN_DENSITY for c in one.columns)
    again = assemble_matrix([f"s{i}" for i in range(5)], vecs, [4, 7, 9])
    np.testing.assert_array_equal(again.values, fm.values)


def test_all_nine_subsets_expressible():
    assert len(FEATURE_SUBSETS) == 9
    sizes = sorted(len(resolve_subset(s)) for s in FEATURE_SUBSETS)
    assert sizes == [1, 1, 1, 1, 2, 2, 2, 2, 4]


def test_assemble_rejects_inconsistent_index(rng):
    with pytest.raises(DataError):
        assemble_matrix(["a", "b"], [rng.normal(size=(3, 4)), rng.normal(size=(2, 4))], [1, 2, 3])


def test_feature_matrix_rejects_nan():
    with pytest.raises(DataError):
        FeatureMatrix(["a"], ["x"], np.array([[np.nan]]))


def test_column_name_roundtrip():
    for kind in KINDS:
        assert parse_column(column_name((12, kind))) == (12, kind)
    assert parse_column("LV_density") == "LV_density"


def test_matrix_csv_roundtrip(tmp_path, rng):
    vecs = [rng.normal(size=(2, 4)) for _ in range(3)]
    fm = assemble_matrix(["a", "b", "c"], vecs, [1, 5], targets={"age": np.array([50.1, 60.2, 55.3])})
    write_matrix_csv(fm, tmp_path / "f.csv")
    back = read_matrix_csv(tmp_path / "f.csv")
    assert back.subject_ids == fm.subject_ids
    assert back.columns == fm.columns
    np.testing.assert_array_equal(back.values, fm.values)
    np.testing.assert_array_equal(back.target("age"), fm.target("age"))
