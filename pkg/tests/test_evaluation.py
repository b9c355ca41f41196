import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartmorph.errors import ConfigError, DataError, FoldError
from heartmorph.evaluation import (
    STANDARD_GRIDS, ablation_sweep, assign_folds, bonferroni_threshold, correlation_matrix,
    correlation_study, cross_validate, fisher_z_test, kfold_split, mae, metrics_rows, pearson,
    qc_filter, r2, read_rows, significant, spearman, write_correlations, write_fisher, write_rows,
)
from heartmorph.features import FeatureMatrix
from heartmorph.model import PipelineConfig, fit_pipeline


# --- brute-force oracles ---------------------------------------------------------------------------

def oracle_mae(y, p):
    return sum(abs(a - b) for a, b in zip(y, p)) / len(y)


def oracle_r2(y, p):
    m = sum(y) / len(y)
    return 1 - sum((a - b) ** 2 for a, b in zip(y, p)) / sum((a - m) ** 2 for a in y)


def oracle_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    return cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))


def oracle_ranks(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def oracle_spearman(y, p):
    return oracle_pearson(oracle_ranks(list(y)), oracle_ranks(list(p)))


def test_metrics_match_oracles_100_instances():
    for seed in range(120):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 80))
        y = rng.normal(size=n)
        p = y + rng.normal(size=n) * rng.uniform(0.1, 2)
        if seed % 3 == 0:  # ties
            y, p = np.round(y, 1), np.round(p, 1)
        if np.ptp(y) == 0 or np.ptp(p) == 0:
            continue
        assert mae(y, p) == pytest.approx(oracle_mae(y, p), rel=1e-12)
        assert r2(y, p) == pytest.approx(oracle_r2(y, p), rel=1e-10)
        assert spearman(y, p) == pytest.approx(oracle_spearman(y, p), abs=1e-12)


def test_pearson_matrix_matches_oracle_100_instances():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = correlation_matrix(list(rng.normal(size=(4, 30))))
        np.testing.assert_array_equal(np.diag(m), 1.0)
        vs = list(rng.normal(size=(3, 25)))
        m = correlation_matrix(vs)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert m[i, j] == pytest.approx(oracle_pearson(vs[i], vs[j]), abs=1e-12)


def test_metric_examples():
    # d = (1, 1, 1, 1): 1 - 6*4 / (4*15) = 0.6
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6)
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(oracle_spearman([1, 2, 3, 4], [2, 1, 4, 3]))
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert r2([1, 2, 3], [1, 2, 3]) == 1.0
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


def test_r2_constant_target_is_error():
    with pytest.raises(DataError):
        r2([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5000, 5000), min_size=3, max_size=30, unique=True),
       st.integers(0, 10_000))
def test_spearman_invariant_under_monotone_transform(y, seed):
    p = np.random.default_rng(seed).normal(size=len(y))
    y = np.asarray(y) / 50.0  # well separated, so exp stays strictly increasing in floats
    base = spearman(y, p)
    assert spearman(np.exp(y), p) == pytest.approx(base, abs=1e-12)
    assert spearman(y, 3 * p ** 3 + 1) == pytest.approx(base, abs=1e-12)


# --- folds -------------------------------------------------------------------------------------------

def test_fold_sizes_721():
    sizes = sorted(kfold_split(721, 25, 0).sizes())
    assert sizes == [28] * 4 + [29] * 21


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(2, 25), st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    if n < k:
        with pytest.raises(ConfigError):
            kfold_split(n, k, seed)
        return
    fa = kfold_split(n, k, seed)
    assert np.ptp(fa.sizes()) <= 1
    seen = np.concatenate([fa.train_val(f)[1] for f in range(k)])
    assert sorted(seen) == list(range(n))


def test_assign_folds_order_independent():
    ids = [f"s{i:03d}" for i in range(60)]
    a = assign_folds(ids, 5, 3)
    b = assign_folds(list(reversed(ids)), 5, 3)
    assert a == b


# --- Fisher test ----------------------------------------------------------------------------------------

def mp_fisher(r1, r2_, n):
    mpmath.mp.dps = 50
    z = (mpmath.atanh(r1) - mpmath.atanh(r2_)) / mpmath.sqrt(mpmath.mpf(2) / (n - 3))
    return z, mpmath.erfc(abs(z) / mpmath.sqrt(2))


def test_fisher_against_mpmath(rng):
    for _ in range(200):
        r1, r2_ = rng.uniform(-0.99, 0.99, size=2)
        n = int(rng.integers(4, 5000))
        z, p = fisher_z_test(r1, r2_, n)
        mz, mp_ = mp_fisher(r1, r2_, n)
        assert z == pytest.approx(float(mz), rel=1e-12, abs=1e-12)
        assert abs(p - float(mp_)) < 1e-10


def test_fisher_examples():
    z, p = fisher_z_test(0.653, 0.919, 721)
    assert p < 1e-4 and significant(p)
    z, p = fisher_z_test(0.267, 0.439, 721)
    assert p < 1e-3 and significant(p)
    assert fisher_z_test(0.4, 0.4, 100) == (0.0, 1.0)


def test_fisher_symmetry(rng):
    for _ in range(50):
        r1, r2_ = rng.uniform(-0.9, 0.9, size=2)
        z1, p1 = fisher_z_test(r1, r2_, 50)
        z2, p2 = fisher_z_test(r2_, r1, 50)
        assert z1 == -z2 and p1 == p2


@pytest.mark.parametrize("args", [(1.0, 0.5, 100), (0.5, -1.0, 100), (0.5, 0.4, 3)])
def test_fisher_domain(args):
    with pytest.raises(DataError):
        fisher_z_test(*args)


def test_bonferroni_threshold():
    assert bonferroni_threshold() == pytest.approx(0.0028, abs=1e-4)
    t = 0.05 / 18
    assert significant(np.nextafter(t, 0)) and not significant(t)


# --- QC filter ------------------------------------------------------------------------------------------------

def test_qc_all_equal_removes_nobody():
    ids = list("abcdef")
    kept, removed = qc_filter({"LVV": [1.0] * 6, "RVV": [0.5] * 6}, ids)
    assert kept == ids and removed == []


def test_qc_planted_outlier_removed(rng):
    ids = [f"s{i}" for i in range(50)]
    errs = {t: np.abs(rng.normal(size=50)) for t in ("LVV", "RVV", "LAV", "RAV", "MYOV")}
    errs["LVV"][7] = 100 * np.median(errs["LVV"])
    _, removed = qc_filter(errs, ids)
    assert "s7" in removed


def test_qc_monotone(rng):
    ids = [f"s{i}" for i in range(40)]
    errs = {"LVV": np.abs(rng.normal(size=40)), "RVV": np.abs(rng.normal(size=40))}
    _, before = qc_filter(errs, ids)
    errs["LVV"] = errs["LVV"].copy()
    errs["LVV"][3] *= 50
    _, after = qc_filter(errs, ids)
    assert set(before) - {"s3"} <= set(after)


def test_qc_uses_absolute_errors():
    ids = list("abcdefgh")
    errs = {"LVV": [0.1, -0.1, 0.2, -0.2, 0.1, -0.15, 0.12, -9.0]}
    assert qc_filter(errs, ids)[1] == ["h"]


# --- cross-validation -----------------------------------------------------------------------------------------

def linear_matrix(rng, n=100, d=10, noise=0.1):
    X = rng.normal(size=(n, d))
    y = X @ rng.normal(size=d) + noise * rng.normal(size=n)
    return FeatureMatrix([f"s{i:03d}" for i in range(n)], [f"f{j}" for j in range(d)], X), y


def test_cv_covers_each_subject_once(rng):
    fm, y = linear_matrix(rng)
    res = cross_validate(fm, y, PipelineConfig(clip_level=5.0, n_components=10), k=7)
    assert sorted(res.subject_ids) == fm.subject_ids
    assert np.bincount(res.folds).sum() == 100
    assert res.report.r2 > 0.95


def test_cv_row_order_invariant(rng):
    fm, y = linear_matrix(rng)
    perm = rng.permutation(100)
    shuffled = fm.subset_rows(perm)
    cfg = PipelineConfig(clip_level=3.0, n_components=5)
    a = cross_validate(fm, y, cfg, k=5)
    b = cross_validate(shuffled, y[perm], cfg, k=5)
    np.testing.assert_array_equal(a.y_pred, b.y_pred)
    assert a.subject_ids == b.subject_ids


def test_cv_threads_identical(rng):
    fm, y = linear_matrix(rng)
    cfg = PipelineConfig(clip_level=3.0, n_components=5)
    a = cross_validate(fm, y, cfg, k=5, threads=1)
    b = cross_validate(fm, y, cfg, k=5, threads=4)
    np.testing.assert_array_equal(a.y_pred, b.y_pred)


def test_cv_pure_noise_target():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 40))
    fm = FeatureMatrix([f"s{i:03d}" for i in range(500)], [f"f{j}" for j in range(40)], X)
    res = cross_validate(fm, rng.normal(size=500), PipelineConfig(n_components=10))
    assert res.report.r2 <= 0.05


def test_cv_no_leakage_from_validation_targets(rng):
    fm, y = linear_matrix(rng, n=60)
    cfg = PipelineConfig(clip_level=2.0, n_components=6)
    clean = cross_validate(fm, y, cfg, k=5, keep_models=True)
    fold = 2
    corrupted = y.copy()
    corrupted[clean.folds == fold] = 1e6  # positions are in subject-id order, as is fm
    dirty = cross_validate(fm, corrupted, cfg, k=5, keep_models=True)
    a, b = clean.models[fold], dirty.models[fold]
    np.testing.assert_array_equal(a.standardizer.mean, b.standardizer.mean)
    np.testing.assert_array_equal(a.pca.components, b.pca.components)
    np.testing.assert_array_equal(a.regressor.coef, b.regressor.coef)
    assert a.standardizer.target_mean == b.standardizer.target_mean


def test_cv_errors(rng):
    fm, y = linear_matrix(rng, n=10)
    with pytest.raises(ConfigError):
        cross_validate(fm, y, k=25)
    with pytest.raises(DataError):
        cross_validate(fm, y[:5], k=5)
    bad = y.copy()
    bad[0] = np.nan
    with pytest.raises(DataError):
        cross_validate(fm, bad, k=5)


def test_cv_wraps_numerical_failures(rng):
    fm, y = linear_matrix(rng, n=20)

    def exploding(X, y, config, columns):
        raise np.linalg.LinAlgError("boom")

    with pytest.raises(FoldError) as ei:
        cross_validate(fm, y, k=4, fit=exploding)
    assert ei.value.fold == 0


# --- correlation study ---------------------------------------------------------------------------------------------

def test_correlation_study_fisher_rows(rng):
    age = rng.normal(size=200)
    wh = age + 0.5 * rng.normal(size=200)
    lv = wh + 0.5 * rng.normal(size=200)
    s = correlation_study({"whole_heart": wh, "lv": lv}, age, reference="whole_heart")
    assert s.labels == ["age", "whole_heart", "lv"]
    row = s.fisher[0]
    assert row["label"] == "lv"
    assert row["rho1"] == pytest.approx(pearson(age, lv))
    assert row["rho2"] == pytest.approx(pearson(wh, lv))
    with pytest.raises(ConfigError):
        correlation_study({"lv": lv}, age, reference="whole_heart")


# --- ablation ---------------------------------------------------------------------------------------------------------

def test_single_value_sweep_equals_cross_validate(rng):
    fm, y = linear_matrix(rng)
    base = PipelineConfig(clip_level=1.0, n_components=5)
    rows = ablation_sweep("clip_level", [2.0], base, lambda a, v: fm, y, k=5)
    res = cross_validate(fm, y, PipelineConfig(clip_level=2.0, n_components=5), k=5)
    assert rows[0]["r2"] == res.report.r2 and rows[0]["mae"] == res.report.mae


def test_rank_two_saturation():
    rng = np.random.default_rng(0)
    latent = rng.normal(size=(200, 2)) * [3.0, 2.0]
    X = latent @ rng.normal(size=(2, 30)) + 1e-3 * rng.normal(size=(200, 30))
    y = latent @ [1.0, -1.0]
    fm = FeatureMatrix([f"s{i:03d}" for i in range(200)], [f"f{j}" for j in range(30)], X)
    rows = ablation_sweep("n_components", [1, 2, 4, 8], PipelineConfig(clip_level=1e6), lambda a, v: fm, y, k=5)
    r = [row["r2"] for row in rows]
    assert r[0] < 0.9
    assert r[1] > 0.999
    assert abs(r[2] - r[1]) < 1e-3 and abs(r[3] - r[1]) < 1e-3


def test_clip_sweep_flat_on_noiseless_linear_data():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(150, 6))  # |z| stays below ~1.8
    y = X @ rng.normal(size=6)
    fm = FeatureMatrix([f"s{i:03d}" for i in range(150)], [f"f{j}" for j in range(6)], X)
    values = [v for v in STANDARD_GRIDS["clip_level"] if v >= 2.0]
    rows = ablation_sweep("clip_level", values, PipelineConfig(n_components=6), lambda a, v: fm, y, k=5)
    r = [row["r2"] for row in rows]
    assert max(r) - min(r) < 0.01


def test_standard_grids():
    assert STANDARD_GRIDS["grid_size"] == list(range(10, 26))
    assert len(STANDARD_GRIDS["clip_level"]) == 20 and STANDARD_GRIDS["clip_level"][-1] == 5.0
    assert STANDARD_GRIDS["n_components"] == list(range(50, 601, 50))
    assert len(STANDARD_GRIDS["feature_subset"]) == 9


def test_unknown_axis():
    with pytest.raises(ConfigError):
        ablation_sweep("learning_rate", [1], PipelineConfig(), None, [1, 2])


# --- CSV output -----------------------------------------------------------------------------------------------------------

def test_csv_writers_are_deterministic(tmp_path, rng):
    fm, y = linear_matrix(rng, n=30)
    res = cross_validate(fm, y, PipelineConfig(n_components=3), k=3)
    write_rows(tmp_path / "a.csv", metrics_rows("age", res))
    write_rows(tmp_path / "b.csv", metrics_rows("age", res))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = read_rows(tmp_path / "a.csv")
    assert rows[-1]["fold"] == "pooled" and float(rows[-1]["r2"]) == res.report.r2
    s = correlation_study({"whole_heart": y + 1, "lv": res.y_pred}, res.y, reference="whole_heart")
    write_correlations(tmp_path / "c.csv", s)
    write_fisher(tmp_path / "f.csv", s.fisher)
    assert read_rows(tmp_path / "c.csv")[0]["label"] == "age"
    assert read_rows(tmp_path / "f.csv")[0]["significant"] in ("true", "false")


def test_fit_pipeline_is_default_fit(rng):
    fm, y = linear_matrix(rng, n=30)
    cfg = PipelineConfig(n_components=3)
    a = cross_validate(fm, y, cfg, k=3)
    b = cross_validate(fm, y, cfg, k=3, fit=fit_pipeline)
    np.testing.assert_array_equal(a.y_pred, b.y_pred)
