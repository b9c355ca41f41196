"""Supervoxel features, ROI composition and feature-matrix assembly."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .supervoxel import SupervoxelMap
from .volume import LabelVolume, Volume

MIN_SUPERVOXEL_VOXELS = 50
IQR_FACTOR = 1.5

SEGMENTS = ("LV", "RV", "LA", "RA", "MYO", "Aorta", "Other")
NAMED_SEGMENTS = SEGMENTS[:6]
# label value of each named segment in segmentation volumes
SEGMENT_LABELS = {name: i + 1 for i, name in enumerate(SEGMENTS)}


class FeatureKind(enum.Enum):
    MEDIAN_DENSITY = "median_density"
    MEDIAN_JACDET = "median_jacdet"
    STD_DENSITY = "std_density"
    STD_JACDET = "std_jacdet"

    @classmethod
    def parse(cls, text):
        try:
            return cls(text)
        except ValueError:
            raise ConfigError(
                f"unknown feature kind {text!r}; expected one of {[k.value for k in cls]}"
            ) from None


KINDS = tuple(FeatureKind)

FEATURE_SUBSETS = {
    "all": KINDS,
    "median_density": (FeatureKind.MEDIAN_DENSITY,),
    "median_volume": (FeatureKind.MEDIAN_JACDET,),
    "stddev_density": (FeatureKind.STD_DENSITY,),
    "stddev_volume": (FeatureKind.STD_JACDET,),
    "median_stddev_density": (FeatureKind.MEDIAN_DENSITY, FeatureKind.STD_DENSITY),
    "median_stddev_volume": (FeatureKind.MEDIAN_JACDET, FeatureKind.STD_JACDET),
    "median_density_volume": (FeatureKind.MEDIAN_DENSITY, FeatureKind.MEDIAN_JACDET),
    "stddev_density_volume": (FeatureKind.STD_DENSITY, FeatureKind.STD_JACDET),
}


def resolve_subset(subset):
    """Accept a subset name, a FeatureKind or an iterable of kinds/names."""
    if isinstance(subset, str):
        if subset not in FEATURE_SUBSETS:
            raise ConfigError(
                f"unknown feature subset {subset!r}; expected one of {sorted(FEATURE_SUBSETS)}"
            )
        return FEATURE_SUBSETS[subset]
    if isinstance(subset, FeatureKind):
        return (subset,)
    kinds = {k if isinstance(k, FeatureKind) else FeatureKind.parse(k) for k in subset}
    if not kinds:
        raise ConfigError("feature subset must not be empty")
    return tuple(k for k in KINDS if k in kinds)


# --- robust statistics ---------------------------------------------------------

def _quartiles(sorted_values):
    n = len(sorted_values)
    pos = np.array([0.25, 0.75]) * (n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


def iqr_keep(values):
    """Boolean mask of values inside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]."""
    values = np.asarray(values, dtype=np.float64)
    q1, q3 = _quartiles(np.sort(values))
    iqr = q3 - q1
    return (values >= q1 - IQR_FACTOR * iqr) & (values <= q3 + IQR_FACTOR * iqr)


def robust_stats(values, filter_by=None):
    """Median and IQR-filtered sample standard deviation.

    Quartiles use linear interpolation. ``filter_by`` supplies the values
    whose IQR fences decide which entries survive (defaults to ``values``).
    A single surviving value gives a standard deviation of 0.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("robust_stats of an empty sample")
    if not np.all(np.isfinite(values)):
        raise DataError("robust_stats input contains non-finite values")
    median = float(np.median(values))
    keep = iqr_keep(values if filter_by is None else np.asarray(filter_by, dtype=np.float64).ravel())
    kept = values[keep]
    std = float(np.std(kept, ddof=1)) if kept.size > 1 else 0.0
    return median, std


# --- ROIs -----------------------------------------------------------------------

@dataclass(frozen=True)
class RoiSpec:
    name: str
    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise ConfigError(f"ROI {self.name!r} has no segments")
        unknown = [s for s in self.segments if s not in SEGMENTS]
        if unknown:
            raise ConfigError(f"unknown segment(s) {unknown}; expected a subset of {list(SEGMENTS)}")


ROIS = {
    "whole_heart": RoiSpec("whole_heart", SEGMENTS),
    "lv_rv_la_ra_myo_aorta": RoiSpec("lv_rv_la_ra_myo_aorta", NAMED_SEGMENTS),
    "lv_rv_la_ra": RoiSpec("lv_rv_la_ra", ("LV", "RV", "LA", "RA")),
    "only_other": RoiSpec("only_other", ("Other",)),
    "lv": RoiSpec("lv", ("LV",)),
    "rv": RoiSpec("rv", ("RV",)),
    "la": RoiSpec("la", ("LA",)),
    "ra": RoiSpec("ra", ("RA",)),
    "myo": RoiSpec("myo", ("MYO",)),
    "aorta": RoiSpec("aorta", ("Aorta",)),
}


def roi_spec(name) -> RoiSpec:
    key = str(name).strip().lower().replace(" ", "_").replace(",", "")
    if key not in ROIS:
        raise ConfigError(f"unknown roi {name!r}; expected one of {list(ROIS)}")
    return ROIS[key]


def compose_roi(segments: LabelVolume, heart_mask: LabelVolume, spec: RoiSpec) -> LabelVolume:
    """Binary mask for ``spec``; "Other" is the heart minus the six named segments."""
    if segments.dims != heart_mask.dims:
        raise DataError(f"segment dims {segments.dims} differ from heart mask dims {heart_mask.dims}")
    seg = segments.data
    heart = heart_mask.data > 0
    out = np.zeros(seg.shape, dtype=bool)
    for name in spec.segments:
        if name == "Other":
            named = np.isin(seg, [SEGMENT_LABELS[s] for s in NAMED_SEGMENTS])
            out |= heart & ~named
        else:
            out |= seg == SEGMENT_LABELS[name]
    return LabelVolume(out.astype(np.int32), segments.spacing)


# --- supervoxel features ----------------------------------------------------------

@dataclass(frozen=True)
class SupervoxelIndex:
    """Supervoxels kept after intersecting with an ROI, plus their voxels.

    Depends only on template geometry, so one index serves every subject.
    """

    ids: np.ndarray
    order: np.ndarray  # flat voxel indices grouped by supervoxel
    offsets: np.ndarray  # group i is order[offsets[i]:offsets[i + 1]]
    dims: tuple

    def __len__(self):
        return len(self.ids)

    def groups(self):
        for i in range(len(self.ids)):
            yield self.order[self.offsets[i]:self.offsets[i + 1]]

    def sizes(self):
        return np.diff(self.offsets)


def build_index(sv: SupervoxelMap, roi: LabelVolume,
                min_voxels: int = MIN_SUPERVOXEL_VOXELS) -> SupervoxelIndex:
    """Retain supervoxels with at least ``min_voxels`` voxels inside ``roi``."""
    if sv.labels.dims != roi.dims:
        raise DataError(f"roi dims {roi.dims} differ from supervoxel dims {sv.labels.dims}")
    inside = roi.data.ravel() > 0
    if not inside.any():
        raise DataError("roi mask is empty")
    labels = sv.labels.data.ravel()
    flat = np.flatnonzero(inside & (labels > 0))
    lab = labels[flat]
    counts = np.bincount(lab, minlength=sv.count + 1)
    keep_ids = np.flatnonzero(counts >= min_voxels)
    keep_ids = keep_ids[keep_ids > 0]
    if keep_ids.size == 0:
        raise DataError(f"every supervoxel has fewer than {min_voxels} voxels inside the roi")
    sel = np.isin(lab, keep_ids)
    flat, lab = flat[sel], lab[sel]
    # stable sort keeps voxels of a group in ascending flat order
    perm = np.argsort(lab, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(counts[keep_ids])])
    return SupervoxelIndex(keep_ids.astype(np.int64), flat[perm], offsets, sv.labels.dims)


def extract_features(density: Volume, jacdet: Volume, index: SupervoxelIndex,
                     jacdet_filter: str = "jacdet") -> np.ndarray:
    """Four robust features per retained supervoxel, shape ``(len(index), 4)``.

    Columns follow :data:`KINDS`. ``jacdet_filter`` picks whose IQR fences
    filter the JacDet standard deviation: ``"jacdet"`` or ``"density"``.
    """
    if jacdet_filter not in ("jacdet", "density"):
        raise ConfigError(f"jacdet_filter must be 'jacdet' or 'density', got {jacdet_filter!r}")
    if density.dims != tuple(index.dims) or jacdet.dims != tuple(index.dims):
        raise DataError(
            f"grid dims differ: density {density.dims}, jacdet {jacdet.dims}, index {index.dims}"
        )
    return features_from_flat(density.data.ravel(), jacdet.data.ravel(), index, jacdet_filter)


def features_from_flat(dens, jac, index: SupervoxelIndex, jacdet_filter: str = "jacdet") -> np.ndarray:
    """Same as :func:`extract_features` on flat arrays addressed by ``index.order``."""
    out = np.empty((len(index), 4))
    by_density = jacdet_filter == "density"
    for i, vox in enumerate(index.groups()):
        d = dens[vox].astype(np.float64)
        j = jac[vox].astype(np.float64)
        out[i, 0], out[i, 2] = robust_stats(d)
        out[i, 1], out[i, 3] = robust_stats(j, filter_by=d if by_density else None)
    return out


# --- explicit measurements -------------------------------------------------------

@dataclass(frozen=True)
class ExplicitMeasurements:
    mean_density: dict  # segment -> HU
    volume_ml: dict  # segment -> mL

    def as_row(self):
        row = {}
        for s in NAMED_SEGMENTS:
            row[f"{s}_density"] = self.mean_density[s]
            row[f"{s}_volume"] = self.volume_ml[s]
        return row


def explicit_measurements(segments: LabelVolume, density: Volume, spacing=None) -> ExplicitMeasurements:
    """Mean HU and volume in mL of each of the six named segments."""
    if segments.dims != density.dims:
        raise DataError(f"segment dims {segments.dims} differ from density dims {density.dims}")
    sx, sy, sz = spacing if spacing is not None else segments.spacing
    voxel_ml = sx * sy * sz / 1000.0
    seg = segments.data.ravel()
    dens = density.data.ravel().astype(np.float64)
    mean_density, volume = {}, {}
    for name in NAMED_SEGMENTS:
        members = seg == SEGMENT_LABELS[name]
        n = int(members.sum())
        if n == 0:
            raise DataError(f"segment {name} missing from segmentation")
        mean_density[name] = float(dens[members].mean())
        volume[name] = n * voxel_ml
    return ExplicitMeasurements(mean_density, volume)


# --- feature matrix --------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Subjects x features, plus optional named target columns.

    ``columns`` holds ``(supervoxel_id, FeatureKind)`` pairs for supervoxel
    features or plain strings for named measurements.
    """

    subject_ids: list
    columns: list
    values: np.ndarray
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.subject_ids), len(self.columns)):
            raise DataError(
                f"matrix shape {self.values.shape} does not match "
                f"{len(self.subject_ids)} subjects x {len(self.columns)} columns"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix contains missing or non-finite values")
        for name, y in self.targets.items():
            y = np.asarray(y, dtype=np.float64)
            if y.shape != (len(self.subject_ids),):
                raise DataError(f"target {name!r} has {y.shape} values for {len(self.subject_ids)} subjects")
            self.targets[name] = y

    @property
    def n_subjects(self):
        return len(self.subject_ids)

    def column_names(self):
        return [column_name(c) for c in self.columns]

    def target(self, name):
        if name not in self.targets:
            raise ConfigError(f"unknown target {name!r}; available: {sorted(self.targets)}")
        return self.targets[name]

    def subset_rows(self, rows):
        rows = np.asarray(rows)
        return FeatureMatrix(
            [self.subject_ids[i] for i in rows],
            list(self.columns),
            self.values[rows],
            {k: v[rows] for k, v in self.targets.items()},
        )

    def select_kinds(self, subset):
        kinds = set(resolve_subset(subset))
        cols = [i for i, c in enumerate(self.columns) if isinstance(c, tuple) and c[1] in kinds]
        if not cols:
            raise ConfigError(f"no columns for feature subset {subset!r}")
        return FeatureMatrix(
            list(self.subject_ids), [self.columns[i] for i in cols], self.values[:, cols],
            dict(self.targets),
        )


def column_name(col):
    if isinstance(col, tuple):
        sv_id, kind = col
        return f"sv{int(sv_id)}_{kind.value}"
    return str(col)


def parse_column(name):
    if name.startswith("sv") and "_" in name:
        head, kind = name[2:].split("_", 1)
        if head.isdigit():
            try:
                return int(head), FeatureKind(kind)
            except ValueError:
                pass
    return name


def assemble_matrix(subject_ids, vectors, sv_ids, subset="all", targets=None) -> FeatureMatrix:
    """Stack per-subject ``(K, 4)`` feature arrays into a FeatureMatrix.

    Column order is supervoxel id major, feature kind minor.
    """
    kinds = resolve_subset(subset)
    sv_ids = np.asarray(sv_ids)
    if len(subject_ids) != len(vectors):
        raise DataError(f"{len(subject_ids)} subject ids for {len(vectors)} feature vectors")
    rows = []
    for sid, vec in zip(subject_ids, vectors):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (len(sv_ids), 4):
            raise DataError(
                f"subject {sid}: features shaped {vec.shape}, expected ({len(sv_ids)}, 4); "
                "supervoxel index differs between subjects"
            )
        rows.append(vec)
    kind_pos = [KINDS.index(k) for k in kinds]
    columns = [(int(s), k) for s in sv_ids for k in kinds]
    values = np.stack(rows)[:, :, kind_pos].reshape(len(rows), -1) if rows else np.empty((0, len(columns)))
    return FeatureMatrix(list(subject_ids), columns, values, dict(targets or {}))


def write_matrix_csv(fm: FeatureMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tnames = sorted(fm.targets)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", *fm.column_names(), *[f"target:{t}" for t in tnames]])
        for i, sid in enumerate(fm.subject_ids):
            w.writerow([sid, *(repr(float(x)) for x in fm.values[i]),
                        *(repr(float(fm.targets[t][i])) for t in tnames)])


def read_matrix_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty feature file") from None
        rows = list(reader)
    if not header or header[0] != "subject_id":
        raise DataError(f"{path}: first column must be subject_id")
    feat_idx = [i for i, h in enumerate(header) if i > 0 and not h.startswith("target:")]
    targ_idx = [i for i, h in enumerate(header) if h.startswith("target:")]
    try:
        values = np.array([[float(r[i]) for i in feat_idx] for r in rows]).reshape(len(rows), len(feat_idx))
        targets = {header[i][7:]: np.array([float(r[i]) for r in rows]) for i in targ_idx}
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return FeatureMatrix([r[0] for r in rows], [parse_column(header[i]) for i in feat_idx], values, targets)


def write_index_csv(fm: FeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "supervoxel_id", "kind"])
        for i, c in enumerate(fm.columns):
            if isinstance(c, tuple):
                w.writerow([i, c[0], c[1].value])
            else:
                w.writerow([i, "", c])
