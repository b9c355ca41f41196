"""Cross-validation, metrics, correlation studies, Fisher tests, QC and sweeps."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, FoldError, HeartMorphError
from .features import IQR_FACTOR, FeatureMatrix, _quartiles
from .model import PipelineConfig, fit_pipeline

log = logging.getLogger(__name__)

ALPHA = 0.05
N_TESTS = 18
VOLUME_TARGETS = ("LVV", "RVV", "LAV", "RAV", "MYOV", "AV")
QC_TARGETS = ("LVV", "RVV", "LAV", "RAV", "MYOV")


# --- folds --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray  # fold index per position
    k: int
    seed: int

    def train_val(self, fold):
        return np.flatnonzero(self.folds != fold), np.flatnonzero(self.folds == fold)

    def sizes(self):
        return np.bincount(self.folds, minlength=self.k)


def kfold_split(n: int, k: int = 25, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle then round-robin; fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return FoldAssignment(folds, k, seed)


def assign_folds(subject_ids, k: int = 25, seed: int = 0) -> dict:
    """Fold per subject id, independent of the order the ids are listed in."""
    ids = sorted(subject_ids)
    fa = kfold_split(len(ids), k, seed)
    return {sid: int(f) for sid, f in zip(ids, fa.folds)}


# --- metrics -------------------------------------------------------------------------

def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or len(y) < 2:
        raise DataError(f"metric inputs must be equal-length vectors of >= 2 values, got {y.shape}, {yhat.shape}")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def r2(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise DataError("R^2 undefined for a constant target")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def pearson(a, b) -> float:
    """Pearson correlation; NaN when either vector is constant."""
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if den == 0:
        return float("nan")
    return float(np.clip(np.sum(da * db) / den, -1.0, 1.0))


def spearman(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return pearson(rankdata(y), rankdata(yhat))


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    r2: float
    spearman: float
    n: int
    per_fold: tuple = ()  # (fold, n, mae, r2, spearman) rows; r2/spearman may be NaN

    def row(self):
        return {"mae": self.mae, "r2": self.r2, "spearman": self.spearman, "n": self.n}


def metrics(y, yhat) -> MetricsReport:
    return MetricsReport(mae(y, yhat), r2(y, yhat), spearman(y, yhat), len(np.asarray(y)))


def _safe(fn, y, yhat):
    try:
        return fn(y, yhat)
    except DataError:
        return float("nan")


# --- cross-validation -----------------------------------------------------------------

@dataclass
class CVResult:
    subject_ids: list
    folds: np.ndarray
    y: np.ndarray
    y_pred: np.ndarray
    report: MetricsReport
    models: list = field(default_factory=list)  # one TrainedPipeline per fold

    def prediction_rows(self):
        for sid, f, y, p in zip(self.subject_ids, self.folds, self.y, self.y_pred):
            yield {"subject_id": sid, "fold": int(f), "y": float(y), "y_pred": float(p)}


def cross_validate(fm: FeatureMatrix, y, config: PipelineConfig = PipelineConfig(),
                   k: int = 25, seed: int = 0, threads: int = 1, keep_models: bool = False,
                   fit=None) -> CVResult:
    """Out-of-fold predictions for every subject.

    Rows are put in subject-id order first, so the result does not depend on
    how the matrix was ordered. Every statistic of a fold's model comes from
    its training rows only.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (fm.n_subjects,):
        raise DataError(f"target has {y.shape} values for {fm.n_subjects} subjects")
    if not np.all(np.isfinite(y)):
        raise DataError("target contains non-finite values")
    if fm.n_subjects < k:
        raise ConfigError(f"{fm.n_subjects} subjects is fewer than k={k} folds")
    order = sorted(range(fm.n_subjects), key=lambda i: fm.subject_ids[i])
    X = fm.values[order]
    y = y[order]
    ids = [fm.subject_ids[i] for i in order]
    fa = kfold_split(len(ids), k, seed)
    fit = fit or fit_pipeline
    columns = fm.column_names()

    def run(fold):
        tr, va = fa.train_val(fold)
        try:
            model = fit(X[tr], y[tr], config, columns)
            return model, model.predict(X[va])
        except (ConfigError, DataError):
            raise
        except HeartMorphError as exc:
            raise FoldError(fold, exc) from exc
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise FoldError(fold, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(f) for f in range(k)]

    y_pred = np.empty_like(y)
    per_fold = []
    for fold, (_, pred) in enumerate(results):
        _, va = fa.train_val(fold)
        y_pred[va] = pred
        fold_mae = float(np.mean(np.abs(y[va] - pred)))  # defined even for 1-subject folds
        per_fold.append((fold, len(va), fold_mae, _safe(r2, y[va], pred), _safe(spearman, y[va], pred)))
    rep = MetricsReport(mae(y, y_pred), r2(y, y_pred), spearman(y, y_pred), len(y), tuple(per_fold))
    models = [m for m, _ in results] if keep_models else []
    return CVResult(ids, fa.folds, y, y_pred, rep, models)


def fold_models(fm: FeatureMatrix, y, config: PipelineConfig, k=25, seed=0):
    """The per-fold fitted pipelines only (no predictions)."""
    return cross_validate(fm, y, config, k, seed, keep_models=True).models


# --- correlation study ------------------------------------------------------------------

@dataclass
class CorrelationStudy:
    labels: list
    matrix: np.ndarray
    fisher: list = field(default_factory=list)
    volume_correlations: dict = field(default_factory=dict)


def correlation_matrix(vectors):
    """Pearson matrix over the rows of ``vectors``; NaN where undefined."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    n = len(vectors)
    if n and any(v.shape != vectors[0].shape for v in vectors):
        raise DataError("all vectors must have the same length")
    m = np.eye(n)
    for i in range(n):
        if np.ptp(vectors[i]) == 0:
            m[i, i] = float("nan")
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = pearson(vectors[i], vectors[j])
    return m


def correlation_study(predictions: dict, age, volumes: dict | None = None,
                      reference: str | None = None) -> CorrelationStudy:
    """Pearson matrix of ``age`` plus every prediction vector.

    With ``reference`` set (e.g. the whole-heart label), each other prediction
    gets a Fisher test of corr(prediction, age) vs corr(prediction, reference).
    ``volumes`` adds age/prediction-vs-volume correlations.
    """
    labels = ["age", *predictions]
    vectors = [np.asarray(age, dtype=np.float64), *predictions.values()]
    mat = correlation_matrix(vectors)
    study = CorrelationStudy(labels, mat)
    n = len(vectors[0])
    if reference is not None:
        if reference not in predictions:
            raise ConfigError(f"reference {reference!r} is not among the predictions")
        ref = labels.index(reference)
        for i, lab in enumerate(labels):
            if lab in ("age", reference):
                continue
            rho_ca, rho_wh = mat[0, i], mat[ref, i]
            z, p = fisher_z_test(rho_ca, rho_wh, n)
            study.fisher.append({"label": lab, "rho1": rho_ca, "rho2": rho_wh, "n": n,
                                 "z": z, "p": p, "significant": significant(p)})
    if volumes:
        for lab, vec in zip(labels, vectors):
            study.volume_correlations[lab] = {name: pearson(vec, v) for name, v in volumes.items()}
    return study


# --- Fisher z-test ------------------------------------------------------------------------

def normal_sf(z):
    """Upper tail of the standard normal, ``1 - Phi(z)``, via erfc."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def fisher_z_test(rho1: float, rho2: float, n: int):
    """Two-sided test that two correlations from samples of size n are equal.

    Returns ``(z, p)`` with ``z = (atanh rho1 - atanh rho2) / sqrt(2 / (n - 3))``.
    """
    if not (abs(rho1) < 1 and abs(rho2) < 1):
        raise DataError(f"correlations must satisfy |rho| < 1, got {rho1}, {rho2}")
    if n <= 3:
        raise DataError(f"n must exceed 3, got {n}")
    z = (math.atanh(rho1) - math.atanh(rho2)) / math.sqrt(2.0 / (n - 3))
    p = 2.0 * normal_sf(abs(z))
    return z, min(p, 1.0)


def bonferroni_threshold(alpha=ALPHA, n_tests=N_TESTS):
    return alpha / n_tests


def significant(p, alpha=ALPHA, n_tests=N_TESTS):
    return bool(p < bonferroni_threshold(alpha, n_tests))


# --- QC filter -----------------------------------------------------------------------------

def upper_fence(values):
    q1, q3 = _quartiles(np.sort(np.asarray(values, dtype=np.float64)))
    return q3 + IQR_FACTOR * (q3 - q1)


def qc_filter(errors: dict, subject_ids):
    """Subjects whose absolute error stays under every target's upper IQR fence.

    ``errors`` maps target name -> per-subject errors aligned with
    ``subject_ids``. Returns ``(retained_ids, removed_ids)``.
    """
    subject_ids = list(subject_ids)
    bad = np.zeros(len(subject_ids), dtype=bool)
    for name, e in errors.items():
        e = np.abs(np.asarray(e, dtype=np.float64))
        if e.shape != (len(subject_ids),):
            raise DataError(f"errors for {name!r} do not match the subject list")
        bad |= e > upper_fence(e)
    kept = [s for s, b in zip(subject_ids, bad) if not b]
    removed = [s for s, b in zip(subject_ids, bad) if b]
    return kept, removed


# --- ablation sweeps ---------------------------------------------------------------------------

ABLATION_AXES = ("grid_size", "clip_level", "n_components", "feature_subset")
STANDARD_GRIDS = {
    "grid_size": list(range(10, 26)),
    "clip_level": [0.25 * i for i in range(1, 21)],
    "n_components": list(range(50, 601, 50)),
    "feature_subset": [
        "all", "median_density", "median_volume", "stddev_density", "stddev_volume",
        "median_density_volume", "stddev_density_volume", "median_stddev_density",
        "median_stddev_volume",
    ],
}


def ablation_sweep(axis: str, values, base: PipelineConfig, matrix_for, y, k=25, seed=0,
                   threads=1):
    """One cross-validation per value with a shared fold seed.

    ``matrix_for(axis, value)`` returns the FeatureMatrix to use for that
    value (it only needs to vary for ``grid_size`` and ``feature_subset``).
    Returns a list of row dicts.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    y = np.asarray(y, dtype=np.float64)
    rows = []
    for value in values:
        config = base
        if axis == "clip_level":
            config = replace(base, clip_level=float(value))
        elif axis == "n_components":
            config = replace(base, n_components=int(value))
        fm = matrix_for(axis, value)
        res = cross_validate(fm, y, config, k, seed, threads=threads)
        n_train = fm.n_subjects - int(np.max(np.bincount(res.folds)))
        row = {"axis": axis, "value": value, "n_features": fm.values.shape[1],
               "effective_n_components": min(config.n_components, n_train, fm.values.shape[1])
               if config.use_pca else 0,
               **res.report.row()}
        log.info("ablation %s=%s: R2=%.4f", axis, value, res.report.r2)
        rows.append(row)
    return rows


# --- CSV output --------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_rows(path, rows, header=None):
    rows = list(rows)
    header = header or (list(rows[0]) if rows else [])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h, "")) for h in header])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metrics_rows(target, res: CVResult):
    rows = [{"target": target, "fold": f, "n": n, "mae": m, "r2": r, "spearman": s}
            for f, n, m, r, s in res.report.per_fold]
    rows.append({"target": target, "fold": "pooled", **res.report.row()})
    return rows


def write_correlations(path, study: CorrelationStudy):
    rows = []
    for i, a in enumerate(study.labels):
        rows.append({"label": a, **{b: study.matrix[i, j] for j, b in enumerate(study.labels)}})
    write_rows(path, rows, ["label", *study.labels])


def write_fisher(path, tests):
    write_rows(path, tests, ["label", "rho1", "rho2", "n", "z", "p", "significant"])
