"""3D SLIC over a single intensity channel.

Centroids start on a regular lattice, voxels join the nearest centroid within
a +/-S window under ``D = sqrt(dI^2 + m^2 (ds/S)^2)``, centroids move to the
mean of their members, and a final pass merges disconnected fragments.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .volume import LabelVolume, Volume, load_volume, save_volume

log = logging.getLogger(__name__)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class SlicParams:
    grid_size: int = 14
    proximity: float = 0.2
    max_iters: int = 10
    seed: int = 0
    tol: float = 1e-3
    enforce_connectivity: bool = True

    def __post_init__(self):
        if int(self.grid_size) != self.grid_size or self.grid_size < 2:
            raise ConfigError(f"slic.grid_size must be an integer >= 2, got {self.grid_size}")
        if not self.proximity > 0:
            raise ConfigError(f"slic.proximity must be > 0, got {self.proximity}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError(f"slic.max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class SupervoxelMap:
    labels: LabelVolume
    count: int
    sizes: np.ndarray  # sizes[i] is the voxel count of label i + 1

    @classmethod
    def from_labels(cls, labels: LabelVolume) -> "SupervoxelMap":
        data = labels.data
        k = int(data.max()) if data.size else 0
        sizes = np.bincount(data.ravel(), minlength=k + 1)[1:]
        if np.any(sizes == 0):
            raise DataError("supervoxel labels must be dense in 1..K")
        return cls(labels, k, sizes)

    def ids(self):
        return np.arange(1, self.count + 1)


def lattice_centers(dim: int, step: int) -> np.ndarray:
    """Regular lattice positions along one axis, centred in ``[0, dim - 1]``."""
    n = max(1, dim // step)
    offset = (dim - 1 - (n - 1) * step) / 2.0
    return offset + step * np.arange(n, dtype=np.float64)


def _initial_centroids(img, step):
    axes = [lattice_centers(d, step) for d in img.shape]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    # centroid id order: x fastest, matching the on-disk voxel order
    pos = np.stack([cx.ravel(order="F"), cy.ravel(order="F"), cz.ravel(order="F")], axis=1)
    idx = np.minimum(np.floor(pos + 0.5).astype(int), np.array(img.shape) - 1)
    inten = img[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)
    return pos, inten


def _assign_slab(img, eligible, labels, centers, inten, step, m2, z0, z1):
    """Assign voxels with z in [z0, z1) to their nearest centroid in id order."""
    nx, ny, _ = img.shape
    sub = img[:, :, z0:z1]
    best = np.full(sub.shape, np.inf)
    out = labels[:, :, z0:z1].copy()
    inv_s2 = 1.0 / (step * step)
    for k in range(len(centers)):
        c = centers[k]
        lo = np.maximum(np.ceil(c - step).astype(int), 0)
        hi = np.minimum(np.floor(c + step).astype(int) + 1, [nx, ny, img.shape[2]])
        zlo, zhi = max(lo[2], z0), min(hi[2], z1)
        if zlo >= zhi or lo[0] >= hi[0] or lo[1] >= hi[1]:
            continue
        dx2 = (np.arange(lo[0], hi[0]) - c[0]) ** 2
        dy2 = (np.arange(lo[1], hi[1]) - c[1]) ** 2
        dz2 = (np.arange(zlo, zhi) - c[2]) ** 2
        ds2 = dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :]
        win = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(zlo - z0, zhi - z0))
        dc = sub[win] - inten[k]
        d2 = dc * dc + m2 * ds2 * inv_s2
        b = best[win]
        # strict comparison: the lowest centroid id wins ties
        better = d2 < b
        b[better] = d2[better]
        out[win][better] = k
    out[~eligible[:, :, z0:z1]] = -1
    return out


def _slabs(nz, threads):
    threads = max(1, min(int(threads), nz))
    edges = np.linspace(0, nz, threads + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def enforce_connectivity(labels: np.ndarray, max_passes: int = 10) -> np.ndarray:
    """Merge every non-dominant 26-connected fragment into its main neighbour.

    ``labels`` uses -1 for ineligible voxels. The neighbour sharing the most
    face/edge/corner contacts absorbs the fragment; ties go to the lower label.
    A fragment touching no other label keeps a fresh label of its own.
    """
    labels = labels.copy()
    next_label = int(labels.max()) + 1
    for _ in range(max_passes):
        changed = False
        objects = ndimage.find_objects(labels + 1)
        # labels are shifted by one so -1 is background; objects[lab] <-> lab
        for lab in range(len(objects)):
            sl = objects[lab]
            if sl is None:
                continue
            padded = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
            region = labels[padded]
            comp, n = ndimage.label(region == lab, structure=CONNECTIVITY_26)
            if n <= 1:
                continue
            counts = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(counts)) + 1
            for c in range(1, n + 1):
                if c == keep:
                    continue
                frag = comp == c
                ring = ndimage.binary_dilation(frag, structure=CONNECTIVITY_26) & ~frag
                neigh = region[ring]
                neigh = neigh[(neigh >= 0) & (neigh != lab)]
                if neigh.size:
                    votes = np.bincount(neigh)
                    region[frag] = int(np.argmax(votes))
                else:
                    region[frag] = next_label
                    next_label += 1
                changed = True
        if not changed:
            break
    return labels


def slic_segment(v: Volume, mask: LabelVolume | None = None, p: SlicParams = SlicParams(),
                 threads: int = 1) -> SupervoxelMap:
    """Segment an already clamp-transformed volume into supervoxels.

    Parameters
    ----------
    v : Volume
        Output of :func:`heartmorph.volume.clamp_transform`.
    mask : LabelVolume, optional
        Non-zero voxels are eligible for labelling; all voxels when omitted.
    p : SlicParams
    threads : int
        Worker threads for the assignment step; the result does not depend on it.
    """
    img = np.asarray(v.data, dtype=np.float64)
    step = int(p.grid_size)
    if all(step > d for d in img.shape):
        raise ConfigError(f"grid_size {step} exceeds every volume dimension {img.shape}")
    if mask is not None:
        if mask.dims != v.dims:
            raise DataError(f"mask dims {mask.dims} differ from volume dims {v.dims}")
        eligible = mask.data > 0
    else:
        eligible = np.ones(img.shape, dtype=bool)
    n_eligible = int(eligible.sum())
    if n_eligible == 0:
        raise DataError("no eligible voxels to segment")

    centers, inten = _initial_centroids(img, step)
    k = len(centers)
    m2 = float(p.proximity) ** 2
    labels = np.full(img.shape, -1, dtype=np.int64)
    slabs = _slabs(img.shape[2], threads)
    pool = ThreadPoolExecutor(len(slabs)) if len(slabs) > 1 else None
    grid = np.indices(img.shape, dtype=np.float64).reshape(3, -1)
    try:
        for it in range(int(p.max_iters)):
            prev = labels
            args = (img, eligible, prev, centers, inten, step, m2)
            if pool is None:
                parts = [_assign_slab(*args, z0, z1) for z0, z1 in slabs]
            else:
                parts = list(pool.map(lambda s: _assign_slab(*args, *s), slabs))
            labels = np.concatenate(parts, axis=2)
            changed = int(np.count_nonzero(labels != prev))

            flat = labels.ravel()
            sel = flat >= 0
            lab = flat[sel]
            n = np.bincount(lab, minlength=k).astype(np.float64)
            alive = n > 0
            for ax in range(3):
                s = np.bincount(lab, weights=grid[ax][sel], minlength=k)
                centers[alive, ax] = s[alive] / n[alive]
            s = np.bincount(lab, weights=img.ravel()[sel], minlength=k)
            inten[alive] = s[alive] / n[alive]
            log.debug("slic iteration %d: %d assignments changed", it, changed)
            if it > 0 and changed < p.tol * n_eligible:
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if p.enforce_connectivity:
        labels = enforce_connectivity(labels)

    used = np.unique(labels[labels >= 0])
    lut = np.zeros(int(labels.max()) + 2, dtype=np.int32)
    lut[used + 1] = np.arange(1, len(used) + 1, dtype=np.int32)
    dense = lut[labels + 1]
    return SupervoxelMap.from_labels(LabelVolume(dense, v.spacing))


def save_supervoxels(sv: SupervoxelMap, path) -> Path:
    """Write the label grid plus a ``label,size`` sidecar CSV; returns the CSV path."""
    path = Path(path)
    save_volume(sv.labels, path)
    sidecar = path.with_suffix(".csv")
    with open(sidecar, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "size"])
        for lab, size in zip(sv.ids(), sv.sizes):
            w.writerow([int(lab), int(size)])
    return sidecar


def load_supervoxels(path) -> SupervoxelMap:
    labels = load_volume(path)
    if not isinstance(labels, LabelVolume):
        raise DataError(f"{path}: expected an int32 label volume")
    sv = SupervoxelMap.from_labels(labels)
    sidecar = Path(path).with_suffix(".csv")
    if sidecar.exists():
        with open(sidecar, newline="") as fh:
            rows = list(csv.DictReader(fh))
        sizes = np.array([int(r["size"]) for r in rows])
        if len(sizes) != sv.count or not np.array_equal(sizes, sv.sizes):
            raise DataError(f"{sidecar}: sizes disagree with the label grid")
    return sv
