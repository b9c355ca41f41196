"""Dense 3D grids, the NRRD-subset file format and per-voxel transforms.

Arrays are indexed ``[x, y, z]``; on disk the x index varies fastest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

CLAMP_LOW = -300.0
CLAMP_HIGH = 200.0
CLAMP_SCALE = 300.0


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ConfigError(f"spacing must have 3 components, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ConfigError(f"spacing components must be > 0, got {spacing}")
    return spacing


def _readonly(a):
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    """Scalar grid: HU densities, Jacobian determinants or saliency overlays."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class LabelVolume:
    """Non-negative integer labels; 0 is background/excluded."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"label data must be 3D with all dims >= 1, got shape {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.int32)
        if not np.issubdtype(data.dtype, np.integer):
            raise DataError(f"label data must be integer, got {data.dtype}")
        if data.size and data.min() < 0:
            raise DataError("labels must be non-negative")
        object.__setattr__(self, "data", _readonly(data.astype(np.int32, copy=False)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def mask(self, label=None):
        """Boolean mask of ``label`` (or of all non-zero labels)."""
        if label is None:
            return self.data > 0
        return self.data == label


@dataclass(frozen=True)
class DeformationField:
    """Displacement in mm, shape ``(3, nx, ny, nz)``, template -> subject."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 3 or min(data.shape[1:]) < 1:
            raise DataError(f"deformation data must have shape (3, nx, ny, nz), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise DataError("deformation field contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape[1:]


def clamp_transform(v: Volume) -> Volume:
    """Clamp HU to [-300, 200] and divide by 300."""
    if not np.all(np.isfinite(v.data)):
        raise DataError("non-finite voxel in density volume")
    out = np.clip(v.data.astype(np.float64), CLAMP_LOW, CLAMP_HIGH) / CLAMP_SCALE
    return Volume(out, v.spacing)


def jacobian_determinant(f: DeformationField) -> Volume:
    """Per-voxel determinant of the Jacobian of ``x -> x + u(x)``.

    Central differences in the interior, one-sided differences on the
    boundary faces, all in physical (spacing-scaled) units.
    """
    spacing = tuple(float(s) for s in f.spacing)
    if any(s <= 0 for s in spacing):
        raise ConfigError(f"degenerate spacing {spacing}")
    if min(f.dims) < 2:
        raise DataError(f"jacobian needs >= 2 voxels along every axis, got dims {f.dims}")
    u = f.data.astype(np.float64)
    # grad[i][j] = d u_i / d x_j
    grad = [np.gradient(u[i], *spacing, edge_order=1) for i in range(3)]
    a = [[grad[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
    return Volume(det, f.spacing)


# --- NRRD subset -------------------------------------------------------------

_TYPES = {
    "float32": np.dtype("<f4"),
    "float": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "double": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
    "int": np.dtype("<i4"),
}
_TYPE_NAMES = {np.dtype("<f4"): "float32", np.dtype("<f8"): "float64", np.dtype("<i4"): "int32"}


def save_volume(v, path) -> None:
    """Write a Volume, LabelVolume or DeformationField as NRRD (raw, little endian)."""
    if isinstance(v, LabelVolume):
        arr = v.data.astype("<i4")
    elif isinstance(v, (Volume, DeformationField)):
        arr = v.data.astype(v.data.dtype.newbyteorder("<"))
        if arr.dtype not in _TYPE_NAMES:
            arr = arr.astype("<f8")
    else:
        raise DataError(f"cannot save object of type {type(v).__name__}")

    spacings = [repr(float(s)) for s in v.spacing]
    if isinstance(v, DeformationField):
        sizes = [3, *v.dims]
        spacings = ["nan", *spacings]
        # vector components fastest, then x, y, z
        raw = np.ascontiguousarray(arr.transpose(3, 2, 1, 0)).tobytes()
    else:
        sizes = list(v.dims)
        raw = np.ascontiguousarray(arr.transpose(2, 1, 0)).tobytes()

    header = [
        "NRRD0004",
        f"type: {_TYPE_NAMES[arr.dtype]}",
        f"dimension: {len(sizes)}",
        "sizes: " + " ".join(str(s) for s in sizes),
        "spacings: " + " ".join(spacings),
        "encoding: raw",
        "endian: little",
    ]
    if isinstance(v, LabelVolume):
        header.append("content: labels")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("ascii"))
        fh.write(raw)
    os.replace(tmp, path)


def _read_header(fh):
    magic = fh.readline()
    if not magic.startswith(b"NRRD"):
        raise ParseError("magic", f"not an NRRD file (got {magic[:8]!r})")
    fields = {}
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("header", "unexpected end of file before data")
        line = line.decode("ascii", errors="replace").rstrip("\r\n")
        if line == "":
            return fields
        if line.startswith("#"):
            continue
        if ":=" in line:
            continue
        if ":" not in line:
            raise ParseError("header", f"malformed line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.strip()


def load_volume(path):
    """Read a file written by :func:`save_volume` (or a compatible NRRD)."""
    with open(path, "rb") as fh:
        fields = _read_header(fh)
        raw = fh.read()

    for key in ("type", "dimension", "sizes", "encoding"):
        if key not in fields:
            raise ParseError(key, "missing required field")
    type_name = fields["type"].lower()
    if type_name not in _TYPES:
        raise ParseError("type", f"unsupported type {fields['type']!r}")
    dtype = _TYPES[type_name]
    if fields["encoding"].lower() != "raw":
        raise ParseError("encoding", f"unsupported encoding {fields['encoding']!r}")
    if fields.get("endian", "little").lower() != "little":
        raise ParseError("endian", f"unsupported endian {fields['endian']!r}")
    try:
        dimension = int(fields["dimension"])
        sizes = [int(s) for s in fields["sizes"].split()]
    except ValueError as exc:
        raise ParseError("sizes", str(exc)) from None
    if dimension not in (3, 4):
        raise ParseError("dimension", f"must be 3 or 4, got {dimension}")
    if len(sizes) != dimension or any(s < 1 for s in sizes):
        raise ParseError("sizes", f"expected {dimension} positive sizes, got {fields['sizes']!r}")
    if "spacings" in fields:
        try:
            spacings = [float(s) for s in fields["spacings"].split()]
        except ValueError as exc:
            raise ParseError("spacings", str(exc)) from None
        if len(spacings) != dimension:
            raise ParseError("spacings", f"expected {dimension} values")
    else:
        spacings = [float("nan")] + [1.0] * 3 if dimension == 4 else [1.0] * 3

    count = int(np.prod(sizes))
    if len(raw) != count * dtype.itemsize:
        raise ParseError(
            "sizes",
            f"header sizes {sizes} imply {count} values but data holds "
            f"{len(raw) / dtype.itemsize:g}",
        )
    flat = np.frombuffer(raw, dtype=dtype)

    if dimension == 4:
        if sizes[0] != 3:
            raise ParseError("sizes", f"vector axis must have length 3, got {sizes[0]}")
        data = flat.reshape(sizes[3], sizes[2], sizes[1], 3).transpose(3, 2, 1, 0)
        return DeformationField(data.astype(dtype.newbyteorder("=")), tuple(spacings[1:]))

    data = flat.reshape(sizes[2], sizes[1], sizes[0]).transpose(2, 1, 0)
    data = data.astype(dtype.newbyteorder("="))
    if dtype.kind == "i":
        return LabelVolume(data, tuple(spacings))
    return Volume(data, tuple(spacings))
