"""Flat, dotted-key run configuration with typed defaults.

Files are either ``key = value`` lines (``#`` comments) or the JSON written
to ``run.json``. Later sources override earlier ones.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .features import FEATURE_SUBSETS, roi_spec
from .model import ACTIVATIONS, MlpConfig, PipelineConfig
from .phantom import PhantomSpec
from .supervoxel import SlicParams

VOLUME_TARGET_NAMES = ("LVV", "RVV", "LAV", "RAV", "MYOV", "AV")
TARGET_NAMES = ("age", *VOLUME_TARGET_NAMES, "explicit-baseline")
SINGLE_REGION_ROIS = ("lv", "rv", "la", "ra", "myo", "aorta", "only_other")

# key -> (type, default); "auto" defaults are resolved per target / roi
DEFAULTS = {
    "seed": (int, 0),
    "threads": (int, 1),
    "out": (str, "out"),
    "manifest": (str, ""),
    "template": (str, ""),
    "features": (str, ""),
    "explicit": (str, ""),
    "supervoxels": (str, ""),
    "pipeline": (str, ""),
    "predictions": (str, ""),
    "subjects": (str, ""),
    "target": (str, "age"),
    "targets": (str, "age"),
    "roi": (str, "whole_heart"),
    "features.subset": (str, "all"),
    "features.jacdet_filter": (str, "jacdet"),
    "slic.grid_size": (int, 14),
    "slic.proximity": (float, 0.2),
    "slic.max_iters": (int, 10),
    "clip_level": (str, "auto"),
    "n_components": (str, "auto"),
    "regressor": (str, "ols"),
    "use_pca": (bool, True),
    "pca_method": (str, "svd"),
    "mlp.width": (int, 1),
    "mlp.activation": (str, "identity"),
    "mlp.learning_rate": (float, 1e-2),
    "mlp.l2": (float, 1e-3),
    "mlp.batch_size": (int, 256),
    "mlp.iterations": (int, 10_000),
    "eval.k": (int, 25),
    "eval.seed": (int, 0),
    "saliency.normalize": (str, "per_fold"),
    "saliency.per_kind": (bool, False),
    "ablate.axis": (str, "clip_level"),
    "ablate.values": (str, "standard"),
    "report.reference": (str, "whole_heart"),
    "phantom.n_subjects": (int, 200),
    "phantom.seed": (int, 0),
    "phantom.dims": (str, "64,64,64"),
    "phantom.spacing": (str, "1,1,1"),
    "phantom.age_min": (float, 50.0),
    "phantom.age_max": (float, 65.0),
    "phantom.voxel_noise": (float, 20.0),
    "phantom.deformation_noise": (float, 0.05),
    "phantom.texture_sigma": (float, 10.0),
}


def _coerce(key, value):
    typ = DEFAULTS[key][0]
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            f = float(text)
            if f != int(f):
                raise ValueError(text)
            return int(f)
        return typ(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {typ.__name__}") from None


def parse_text(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split(sep, 1)
        out[k.strip()] = v.strip()
    return out


def load_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return dict(data.get("config", data))
    return parse_text(text, str(path))


class RunConfig:
    """Resolved flat configuration for one subcommand run."""

    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in DEFAULTS.items()}
        self.update(values or {})

    def update(self, values):
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = _coerce(k, v)
        return self

    def __getitem__(self, key):
        return self.values[key]

    def as_dict(self):
        return dict(sorted(self.values.items()))

    # typed views ---------------------------------------------------------------------

    def roi(self):
        return roi_spec(self["roi"]).name

    def slic(self):
        return SlicParams(self["slic.grid_size"], self["slic.proximity"], self["slic.max_iters"], self["seed"])

    def subset(self):
        if self["features.subset"] not in FEATURE_SUBSETS:
            raise ConfigError(
                f"unknown features.subset {self['features.subset']!r}; expected one of {list(FEATURE_SUBSETS)}"
            )
        return self["features.subset"]

    def targets(self):
        names = [t.strip() for t in self["targets"].split(",") if t.strip()]
        if names == ["all"]:
            names = list(TARGET_NAMES)
        for t in names:
            check_target(t)
        if not names:
            raise ConfigError("targets must name at least one target")
        return names

    def clip_for(self, target):
        if self["clip_level"] == "auto":
            return 1.0 if target in ("age", "explicit-baseline") else 3.0
        try:
            return float(self["clip_level"])
        except ValueError:
            raise ConfigError(f"clip_level must be a number or 'auto', got {self['clip_level']!r}") from None

    def components(self):
        if self["n_components"] == "auto":
            return 64 if self.roi() in SINGLE_REGION_ROIS else 550
        try:
            return int(self["n_components"])
        except ValueError:
            raise ConfigError(f"n_components must be an integer or 'auto', got {self['n_components']!r}") from None

    def pipeline(self, target="age", use_pca=None):
        if self["mlp.activation"] not in ACTIVATIONS:
            raise ConfigError(f"mlp.activation must be one of {ACTIVATIONS}")
        mlp = MlpConfig(self["mlp.width"], self["mlp.activation"], self["mlp.learning_rate"],
                        self["mlp.l2"], self["mlp.batch_size"], self["mlp.iterations"], self["seed"])
        return PipelineConfig(
            clip_level=self.clip_for(target),
            n_components=self.components(),
            use_pca=self["use_pca"] if use_pca is None else use_pca,
            regressor=self["regressor"],
            pca_method=self["pca_method"],
            mlp=mlp,
            seed=self["seed"],
        )

    def phantom(self):
        def triple(key, cast):
            parts = [p for p in self[key].replace("x", ",").split(",") if p.strip()]
            if len(parts) != 3:
                raise ConfigError(f"{key} needs three comma-separated values, got {self[key]!r}")
            try:
                return tuple(cast(p) for p in parts)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {self[key]!r}") from None

        return PhantomSpec(
            dims=triple("phantom.dims", int),
            spacing=triple("phantom.spacing", float),
            n_subjects=self["phantom.n_subjects"],
            age_range=(self["phantom.age_min"], self["phantom.age_max"]),
            voxel_noise=self["phantom.voxel_noise"],
            deformation_noise=self["phantom.deformation_noise"],
            texture_sigma=self["phantom.texture_sigma"],
            seed=self["phantom.seed"],
        )


def check_target(name):
    if name not in TARGET_NAMES:
        raise ConfigError(f"unknown target {name!r}; expected one of {list(TARGET_NAMES)}")
    return name
