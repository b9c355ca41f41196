"""Back-projection of regression coefficients to per-feature saliency."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .features import KINDS, FeatureKind
from .model import LinearModel, PcaModel, TrainedPipeline
from .supervoxel import SupervoxelMap
from .volume import Volume, save_volume


@dataclass(frozen=True)
class SaliencyMap:
    columns: tuple  # (supervoxel_id, FeatureKind) per value
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def for_kind(self, kind: FeatureKind) -> dict:
        return {c[0]: float(v) for c, v in zip(self.columns, self.values) if c[1] == kind}


def compute_saliency(pca: PcaModel | None, lin: LinearModel) -> np.ndarray:
    """Raw saliency per standardized feature: ``sum_i w_i(x) beta_i``.

    Without PCA the coefficients are the saliency directly.
    """
    beta = np.asarray(lin.coef, dtype=np.float64)
    if pca is None:
        return beta.copy()
    if beta.shape != (pca.n_components,):
        raise DataError(f"{beta.shape[0]} coefficients for {pca.n_components} PCA components")
    return pca.components.T @ beta


def pipeline_saliency(p: TrainedPipeline) -> np.ndarray:
    if not isinstance(p.regressor, LinearModel):
        raise ConfigError("saliency is defined for the linear regressor only")
    return compute_saliency(p.pca, p.regressor)


def normalize_saliency(raw, columns=None, per_kind: bool = False) -> np.ndarray:
    """Divide by the largest absolute value; all-zero input stays zero.

    With ``per_kind`` the maximum is taken separately within each feature kind
    (``columns`` then supplies the kind of every entry).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("saliency contains non-finite values")
    if not per_kind:
        peak = np.max(np.abs(raw)) if raw.size else 0.0
        return raw / peak if peak > 0 else np.zeros_like(raw)
    if columns is None:
        raise ConfigError("per-kind normalization needs the column kinds")
    out = np.zeros_like(raw)
    kinds = np.array([c[1].value for c in columns])
    for k in np.unique(kinds):
        sel = kinds == k
        peak = np.max(np.abs(raw[sel]))
        if peak > 0:
            out[sel] = raw[sel] / peak
    return out


def aggregate_folds(maps, normalize_first: bool = True, columns=None, per_kind: bool = False):
    """Element-wise mean over folds.

    ``maps`` are per-fold normalized maps when ``normalize_first``; otherwise
    raw maps that are averaged and then normalized once.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise DataError("no saliency maps to aggregate")
    if any(m.shape != maps[0].shape for m in maps):
        raise DataError("saliency maps have different feature indices")
    mean = np.mean(np.stack(maps), axis=0)
    if normalize_first:
        return mean
    return normalize_saliency(mean, columns, per_kind)


def saliency_from_models(models, columns, normalize_first=True, per_kind=False,
                         provenance=None) -> SaliencyMap:
    """Per-fold saliency of fitted linear pipelines, normalized and averaged."""
    columns = tuple(columns)
    if any(not isinstance(c, tuple) for c in columns):
        raise DataError("saliency needs supervoxel feature columns")
    raws = []
    for m in models:
        raw = pipeline_saliency(m)
        if raw.shape != (len(columns),):
            raise DataError("model feature count differs from the column index")
        raws.append(normalize_saliency(raw, columns, per_kind) if normalize_first else raw)
    values = aggregate_folds(raws, normalize_first, columns, per_kind)
    return SaliencyMap(columns, values, dict(provenance or {}, folds=len(models)))


def project_to_volume(s: SaliencyMap, sv: SupervoxelMap, kind: FeatureKind,
                      require_all: bool = False) -> Volume:
    """Paint each supervoxel with its saliency for ``kind``; everything else is 0.

    With ``require_all`` every supervoxel in ``sv`` must have an entry.
    """
    table = np.zeros(sv.count + 1)
    entries = s.for_kind(kind)
    if not entries:
        raise DataError(f"saliency map has no entries for {kind.value}")
    for sv_id, value in entries.items():
        if not 1 <= sv_id <= sv.count:
            raise DataError(f"supervoxel {sv_id} not present in the supervoxel map")
        table[sv_id] = value
    if require_all:
        missing = sorted(set(range(1, sv.count + 1)) - set(entries))
        if missing:
            raise DataError(f"no saliency for supervoxel(s) {missing[:10]}")
    return Volume(table[sv.labels.data], sv.labels.spacing)


def write_saliency(s: SaliencyMap, sv: SupervoxelMap, outdir, target: str):
    """``saliency.csv`` plus one volume per feature kind present."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    from .evaluation import write_rows

    write_rows(outdir / "saliency.csv",
               ({"supervoxel": c[0], "kind": c[1].value, "value": float(v)}
                for c, v in zip(s.columns, s.values)),
               ["supervoxel", "kind", "value"])
    paths = []
    kinds_present = {c[1] for c in s.columns}
    for kind in KINDS:
        if kind in kinds_present:
            path = outdir / f"saliency_{target}_{kind.value}.nrrd"
            save_volume(project_to_volume(s, sv, kind), path)
            paths.append(path)
    return paths
