"""A registered cohort held in memory, with cached supervoxels and feature matrices.

Only voxels inside the heart mask are stored per subject; every ROI is a
subset of it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .errors import DataError
from .features import (
    NAMED_SEGMENTS, FeatureMatrix, SupervoxelIndex, assemble_matrix, build_index, compose_roi,
    explicit_measurements, features_from_flat, roi_spec,
)
from .phantom import (
    GT_COLUMNS, PhantomSpec, generate_template, iter_subjects, load_template, read_manifest,
)
from .supervoxel import SlicParams, SupervoxelMap, slic_segment
from .volume import DeformationField, LabelVolume, Volume, clamp_transform, jacobian_determinant, load_volume

log = logging.getLogger(__name__)

EXPLICIT_COLUMNS = tuple(f"{s}_{m}" for s in NAMED_SEGMENTS for m in ("density", "volume"))


class Cohort:
    """Template-space density and JacDet for a set of subjects."""

    def __init__(self, template_density: Volume, template_labels: LabelVolume, subject_ids, ages,
                 density, jacdet, ground_truth, explicit, threads=1):
        self.template_density = template_density
        self.template_labels = template_labels
        self.heart_mask = LabelVolume((template_labels.data > 0).astype(np.int32), template_labels.spacing)
        self.heart_flat = np.flatnonzero(self.heart_mask.data.ravel())
        self.subject_ids = list(subject_ids)
        self.ages = np.asarray(ages, dtype=np.float64)
        self.density = density  # list of float32 arrays over heart_flat
        self.jacdet = jacdet
        self.ground_truth = {k: np.asarray(v, dtype=np.float64) for k, v in ground_truth.items()}
        self.explicit = np.asarray(explicit, dtype=np.float64)
        self.threads = threads
        self._sv = {}
        self._features = {}

    def __len__(self):
        return len(self.subject_ids)

    # construction ---------------------------------------------------------------------

    @classmethod
    def _collect(cls, template_density, template_labels, items, threads):
        heart_flat = np.flatnonzero(template_labels.data.ravel() > 0)
        ids, ages, dens, jacs, expl = [], [], [], [], []
        gt = {c: [] for c in GT_COLUMNS}
        for sid, age, density, deformation, segments, native, truth in items:
            jd = jacobian_determinant(deformation)
            ids.append(sid)
            ages.append(age)
            dens.append(density.data.ravel()[heart_flat].astype(np.float32))
            jacs.append(jd.data.ravel()[heart_flat].astype(np.float32))
            expl.append([explicit_measurements(segments, native).as_row()[c] for c in EXPLICIT_COLUMNS])
            for c in GT_COLUMNS:
                gt[c].append(truth.get(c, np.nan))
        return cls(template_density, template_labels, ids, ages, dens, jacs, gt, expl, threads)

    @classmethod
    def from_spec(cls, spec: PhantomSpec, threads: int = 1) -> "Cohort":
        template = generate_template(spec)
        items = ((r.subject_id, r.age, r.density, r.deformation, r.segments, r.native_density,
                  r.ground_truth) for r in iter_subjects(spec, template, threads))
        return cls._collect(template.density, template.labels, items, threads)

    @classmethod
    def from_manifest(cls, path, threads: int = 1) -> "Cohort":
        density, labels = load_template(path)
        entries = read_manifest(path)

        def load(e):
            vols = {k: load_volume(p) for k, p in e.paths.items()}
            if not isinstance(vols.get("deformation"), DeformationField):
                raise DataError(f"subject {e.subject_id}: missing or invalid deformation file")
            return (e.subject_id, e.age, vols["density"], vols["deformation"], vols["segments"],
                    vols["native_density"], e.ground_truth)

        return cls._collect(density, labels, (load(e) for e in entries), threads)

    def subset(self, keep_ids) -> "Cohort":
        keep = set(keep_ids)
        rows = [i for i, s in enumerate(self.subject_ids) if s in keep]
        return Cohort(
            self.template_density, self.template_labels,
            [self.subject_ids[i] for i in rows], self.ages[rows],
            [self.density[i] for i in rows], [self.jacdet[i] for i in rows],
            {k: v[rows] for k, v in self.ground_truth.items()}, self.explicit[rows], self.threads,
        )

    # derived data -------------------------------------------------------------------------

    def targets(self) -> dict:
        out = {"age": self.ages}
        out.update(self.ground_truth)
        return out

    def supervoxels(self, params: SlicParams = SlicParams()) -> SupervoxelMap:
        key = params
        if key not in self._sv:
            log.info("SLIC on template with grid_size=%d", params.grid_size)
            self._sv[key] = slic_segment(clamp_transform(self.template_density), None, params, self.threads)
        return self._sv[key]

    def roi_mask(self, roi="whole_heart") -> LabelVolume:
        return compose_roi(self.template_labels, self.heart_mask, roi_spec(roi))

    def index(self, params: SlicParams, roi="whole_heart") -> SupervoxelIndex:
        return build_index(self.supervoxels(params), self.roi_mask(roi))

    def feature_matrix(self, params: SlicParams = SlicParams(), roi="whole_heart", subset="all",
                       jacdet_filter="jacdet") -> FeatureMatrix:
        key = (params, roi_spec(roi).name, jacdet_filter)
        if key not in self._features:
            index = self.index(params, roi)
            # re-address the index into the compact heart-only arrays
            pos = np.full(self.heart_mask.data.size, -1, dtype=np.int64)
            pos[self.heart_flat] = np.arange(len(self.heart_flat))
            compact = replace(index, order=pos[index.order])
            if np.any(compact.order < 0):
                raise DataError("roi extends outside the heart mask")

            def one(i):
                return features_from_flat(self.density[i], self.jacdet[i], compact, jacdet_filter)

            if self.threads > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    vectors = list(pool.map(one, range(len(self))))
            else:
                vectors = [one(i) for i in range(len(self))]
            self._features[key] = assemble_matrix(self.subject_ids, vectors, index.ids, "all", self.targets())
        fm = self._features[key]
        return fm if subset == "all" else fm.select_kinds(subset)

    def explicit_matrix(self) -> FeatureMatrix:
        return FeatureMatrix(list(self.subject_ids), list(EXPLICIT_COLUMNS), self.explicit, self.targets())

    def generative_matrix(self) -> FeatureMatrix:
        """Per-region generative parameters: scale and mean density of the six regions."""
        cols = [f"{p}_{s}" for s in NAMED_SEGMENTS for p in ("scale", "density")]
        values = np.column_stack([self.ground_truth[c] for c in cols])
        return FeatureMatrix(list(self.subject_ids), cols, values, self.targets())
