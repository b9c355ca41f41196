"""Command-line entry point: ``heartmorph <subcommand> [options]``.

Every subcommand resolves a flat configuration (defaults, then ``--config``
files, then flags and ``--set key=value`` overrides), writes it to
``<out>/run.json`` and then runs. ``heartmorph <sub> --config <out>/run.json``
repeats a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, check_target, load_file
from .errors import ConfigError, DataError, HeartMorphError
from .evaluation import (
    ABLATION_AXES, STANDARD_GRIDS, QC_TARGETS, ablation_sweep, correlation_study,
    cross_validate, metrics_rows, qc_filter, read_rows, write_correlations, write_fisher, write_rows,
)
from .features import FeatureMatrix, read_matrix_csv, write_index_csv, write_matrix_csv
from .model import fit_pipeline, load_pipeline, predict, save_pipeline
from .phantom import generate_cohort
from .saliency import saliency_from_models, write_saliency
from .study import Cohort
from .supervoxel import load_supervoxels, save_supervoxels, slic_segment
from .volume import Volume, clamp_transform, load_volume

log = logging.getLogger("heartmorph")

# flags that are shorthands for config keys: flag dest -> key
FLAG_KEYS = {
    "out": "out", "threads": "threads", "seed": "seed", "manifest": "manifest",
    "template": "template", "features": "features", "explicit": "explicit",
    "supervoxels": "supervoxels", "pipeline": "pipeline", "predictions": "predictions",
    "target": "target", "targets": "targets", "roi": "roi", "axis": "ablate.axis",
    "values": "ablate.values", "n_subjects": "phantom.n_subjects", "grid_size": "slic.grid_size",
    "subjects": "subjects",
}


# --- shared helpers -------------------------------------------------------------------------

def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"missing required key {key!r}")
    return cfg[key]


def _read_ids(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "subject_id" not in rows[0]:
        raise DataError(f"{path}: needs a subject_id column")
    return [r["subject_id"] for r in rows if r.get("retained", "true") == "true"]


def _cohort(cfg) -> Cohort:
    cohort = Cohort.from_manifest(_require(cfg, "manifest"), cfg["threads"])
    if cfg["subjects"]:
        keep = _read_ids(cfg["subjects"])
        cohort = cohort.subset(keep)
        log.info("restricted cohort to %d listed subjects", len(cohort))
    return cohort


def _feature_matrix(cfg, cohort=None) -> FeatureMatrix:
    """Supervoxel features from ``features`` or computed from ``manifest``."""
    if cfg["features"]:
        fm = read_matrix_csv(cfg["features"])
        if cfg["subjects"]:
            keep = set(_read_ids(cfg["subjects"]))
            fm = fm.subset_rows([i for i, s in enumerate(fm.subject_ids) if s in keep])
        return fm if cfg.subset() == "all" else fm.select_kinds(cfg.subset())
    cohort = cohort or _cohort(cfg)
    return cohort.feature_matrix(cfg.slic(), cfg.roi(), cfg.subset(), cfg["features.jacdet_filter"])


def _explicit_matrix(cfg, cohort=None) -> FeatureMatrix:
    if cfg["explicit"]:
        return read_matrix_csv(cfg["explicit"])
    return (cohort or _cohort(cfg)).explicit_matrix()


def _supervoxels(cfg, cohort=None):
    if cfg["supervoxels"]:
        return load_supervoxels(cfg["supervoxels"])
    return (cohort or _cohort(cfg)).supervoxels(cfg.slic())


def _matrix_and_y(cfg, target, cohort=None):
    """The design matrix and target vector for one named target."""
    check_target(target)
    if target == "explicit-baseline":
        fm = _explicit_matrix(cfg, cohort)
        return fm, fm.target("age")
    fm = _feature_matrix(cfg, cohort)
    return fm, fm.target(target)


def _config_for(cfg, target):
    # 12 explicit measurements go straight to OLS
    return cfg.pipeline(target, use_pca=False if target == "explicit-baseline" else None)


# --- subcommands ------------------------------------------------------------------------------

def cmd_phantom(cfg):
    spec = cfg.phantom()
    manifest = generate_cohort(spec, _out(cfg), cfg["threads"])
    log.info("wrote %d subjects, manifest %s", spec.n_subjects, manifest)


def cmd_slic(cfg):
    out = _out(cfg)
    if cfg["template"]:
        vol = load_volume(cfg["template"])
        if not isinstance(vol, Volume):
            raise DataError(f"{cfg['template']}: expected a scalar density volume")
        sv = slic_segment(clamp_transform(vol), None, cfg.slic(), cfg["threads"])
    else:
        sv = _cohort(cfg).supervoxels(cfg.slic())
    save_supervoxels(sv, out / "supervoxels.nrrd")
    log.info("%d supervoxels", sv.count)


def cmd_features(cfg):
    out = _out(cfg)
    cohort = _cohort(cfg)
    if cfg["supervoxels"]:
        sv = load_supervoxels(cfg["supervoxels"])
        if sv.labels.data.shape != cohort.template_labels.data.shape:
            raise DataError(f"{cfg['supervoxels']}: grid differs from the template")
        cohort._sv[cfg.slic()] = sv
    sv = cohort.supervoxels(cfg.slic())
    fm = cohort.feature_matrix(cfg.slic(), cfg.roi(), cfg.subset(), cfg["features.jacdet_filter"])
    if not cfg["supervoxels"]:
        save_supervoxels(sv, out / "supervoxels.nrrd")
    write_matrix_csv(fm, out / "features.csv")
    write_index_csv(fm, out / "feature_index.csv")
    write_matrix_csv(cohort.explicit_matrix(), out / "explicit.csv")
    log.info("%d subjects x %d features", *fm.values.shape)


def cmd_fit(cfg):
    out = _out(cfg)
    target = cfg["target"]
    fm, y = _matrix_and_y(cfg, target)
    p = fit_pipeline(fm.values, y, _config_for(cfg, target), fm.column_names())
    save_pipeline(p, out / "pipeline.bin")


def cmd_predict(cfg):
    out = _out(cfg)
    p = load_pipeline(_require(cfg, "pipeline"))
    target = cfg["target"]
    fm = _explicit_matrix(cfg) if target == "explicit-baseline" else _feature_matrix(cfg)
    yhat = predict(p, fm.values, fm.column_names())
    write_rows(out / "predictions.csv",
               ({"subject_id": s, "target": target, "y_pred": v} for s, v in zip(fm.subject_ids, yhat)),
               ["subject_id", "target", "y_pred"])


def cmd_evaluate(cfg):
    out = _out(cfg)
    cohort = None if cfg["features"] else _cohort(cfg)
    metric_rows, pred_rows = [], []
    for target in cfg.targets():
        fm, y = _matrix_and_y(cfg, target, cohort)
        res = cross_validate(fm, y, _config_for(cfg, target), cfg["eval.k"], cfg["eval.seed"],
                             cfg["threads"])
        log.info("%s: MAE=%.4f R2=%.4f rho=%.4f", target, res.report.mae, res.report.r2,
                 res.report.spearman)
        metric_rows.extend(metrics_rows(target, res))
        pred_rows.extend({"target": target, **r} for r in res.prediction_rows())
    write_rows(out / "metrics.csv", metric_rows, ["target", "fold", "n", "mae", "r2", "spearman"])
    write_rows(out / "predictions.csv", pred_rows, ["target", "subject_id", "fold", "y", "y_pred"])
    # reference vs prediction pairs sorted by reference, ready for plotting
    scatter = sorted(pred_rows, key=lambda r: (r["target"], r["y"], r["subject_id"]))
    write_rows(out / "scatter.csv", ({**r, "residual": r["y_pred"] - r["y"]} for r in scatter),
               ["target", "subject_id", "y", "y_pred", "residual"])


def cmd_saliency(cfg):
    out = _out(cfg)
    target = cfg["target"]
    if target == "explicit-baseline":
        raise ConfigError("key 'target': saliency needs supervoxel features, not explicit-baseline")
    cohort = None if cfg["features"] and cfg["supervoxels"] else _cohort(cfg)
    fm, y = _matrix_and_y(cfg, target, cohort)
    sv = _supervoxels(cfg, cohort)
    config = _config_for(cfg, target)
    if config.regressor != "ols":
        raise ConfigError("key 'regressor': saliency is defined for the linear regressor only")
    res = cross_validate(fm, y, config, cfg["eval.k"], cfg["eval.seed"], cfg["threads"], keep_models=True)
    mode = cfg["saliency.normalize"]
    if mode not in ("per_fold", "after_mean"):
        raise ConfigError(f"key 'saliency.normalize' must be per_fold or after_mean, got {mode!r}")
    smap = saliency_from_models(res.models, fm.columns, mode == "per_fold", cfg["saliency.per_kind"],
                                {"target": target})
    write_saliency(smap, sv, out, target)


def _ablation_values(cfg, axis):
    spec = cfg["ablate.values"]
    if spec == "standard":
        return STANDARD_GRIDS[axis]
    items = [v.strip() for v in spec.split(",") if v.strip()]
    try:
        if axis in ("grid_size", "n_components"):
            return [int(v) for v in items]
        if axis == "clip_level":
            return [float(v) for v in items]
    except ValueError:
        raise ConfigError(f"key 'ablate.values': cannot parse {spec!r} for axis {axis}") from None
    return items


def cmd_ablate(cfg):
    out = _out(cfg)
    axis = cfg["ablate.axis"]
    if axis not in ABLATION_AXES:
        raise ConfigError(f"key 'ablate.axis' must be one of {list(ABLATION_AXES)}, got {axis!r}")
    target = cfg["target"]
    if target == "explicit-baseline":
        raise ConfigError("key 'target': ablations run on supervoxel features")
    values = _ablation_values(cfg, axis)
    needs_cohort = axis == "grid_size" or not cfg["features"]
    cohort = _cohort(cfg) if needs_cohort else None
    base_fm = None if axis == "grid_size" else _feature_matrix(cfg, cohort)

    def matrix_for(ax, value):
        if ax == "grid_size":
            params = replace(cfg.slic(), grid_size=int(value))
            return cohort.feature_matrix(params, cfg.roi(), cfg.subset(), cfg["features.jacdet_filter"])
        if ax == "feature_subset":
            return base_fm.select_kinds(value)
        return base_fm

    y = cohort.targets()[target] if base_fm is None else base_fm.target(target)
    rows = ablation_sweep(axis, values, cfg.pipeline(target), matrix_for, y, cfg["eval.k"],
                          cfg["eval.seed"], cfg["threads"])
    write_rows(out / f"ablation_{axis}.csv", rows,
               ["axis", "value", "n_features", "effective_n_components", "mae", "r2", "spearman", "n"])


def _predictions_by_target(path):
    table = {}
    for r in read_rows(path):
        try:
            table.setdefault(r["target"], {})[r["subject_id"]] = (float(r["y"]), float(r["y_pred"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: malformed prediction row ({exc})") from None
    return table


def cmd_qc_filter(cfg):
    out = _out(cfg)
    table = _predictions_by_target(_require(cfg, "predictions"))
    missing = [t for t in QC_TARGETS if t not in table]
    if missing:
        raise DataError(f"{cfg['predictions']}: no predictions for target(s) {missing}")
    ids = sorted(table[QC_TARGETS[0]])
    errors = {}
    for t in QC_TARGETS:
        if sorted(table[t]) != ids:
            raise DataError(f"{cfg['predictions']}: target {t} covers different subjects")
        errors[t] = [table[t][s][1] - table[t][s][0] for s in ids]
    kept, removed = qc_filter(errors, ids)
    removed_set = set(removed)
    write_rows(out / "qc.csv", ({"subject_id": s, "retained": s not in removed_set} for s in ids),
               ["subject_id", "retained"])
    log.info("QC retained %d of %d subjects", len(kept), len(ids))


def _labelled_paths(spec):
    """``label=path`` items; a bare path takes its run's roi (or directory name) as label."""
    out = {}
    for item in [s.strip() for s in spec.split(",") if s.strip()]:
        if "=" in item:
            label, path = item.split("=", 1)
        else:
            path = item
            run = Path(path).parent / "run.json"
            label = Path(path).parent.name
            if run.exists():
                label = json.loads(run.read_text()).get("config", {}).get("roi", label)
        if label in out:
            raise ConfigError(f"key 'predictions': label {label!r} given twice")
        out[label] = Path(path)
    return out


def cmd_report(cfg):
    out = _out(cfg)
    sources = _labelled_paths(_require(cfg, "predictions"))
    preds, age, ids, summary = {}, None, None, []
    for label, path in sources.items():
        table = _predictions_by_target(path).get("age")
        if table is None:
            raise DataError(f"{path}: no age predictions")
        these = sorted(table)
        if ids is None:
            ids = these
            age = np.array([table[s][0] for s in ids])
        elif these != ids:
            raise DataError(f"{path}: subjects differ from the other prediction files")
        preds[label] = np.array([table[s][1] for s in ids])
        mpath = path.parent / "metrics.csv"
        if mpath.exists():
            summary.extend({"label": label, **r} for r in read_rows(mpath) if r["fold"] == "pooled")
    ref = cfg["report.reference"] if cfg["report.reference"] in preds else None
    study = correlation_study(preds, age, reference=ref)
    write_correlations(out / "correlations.csv", study)
    write_fisher(out / "fisher_tests.csv", study.fisher)
    write_rows(out / "summary.csv", summary, ["label", "target", "n", "mae", "r2", "spearman"])


COMMANDS = {
    "phantom": (cmd_phantom, "generate a synthetic phantom cohort", ["n_subjects"]),
    "slic": (cmd_slic, "supervoxels of the template", ["manifest", "template", "grid_size"]),
    "features": (cmd_features, "per-subject supervoxel features",
                 ["manifest", "supervoxels", "roi", "grid_size", "subjects"]),
    "fit": (cmd_fit, "fit one pipeline on all subjects",
            ["manifest", "features", "explicit", "target", "roi", "subjects"]),
    "predict": (cmd_predict, "apply a fitted pipeline",
                ["pipeline", "manifest", "features", "explicit", "target", "roi"]),
    "evaluate": (cmd_evaluate, "k-fold cross-validation for one or more targets",
                 ["manifest", "features", "explicit", "targets", "roi", "grid_size", "subjects"]),
    "saliency": (cmd_saliency, "fold-averaged coefficient saliency",
                 ["manifest", "features", "supervoxels", "target", "roi", "grid_size", "subjects"]),
    "ablate": (cmd_ablate, "sweep one pipeline parameter",
               ["manifest", "features", "axis", "values", "target", "roi", "grid_size", "subjects"]),
    "qc-filter": (cmd_qc_filter, "drop subjects with outlying volume errors", ["predictions"]),
    "report": (cmd_report, "correlations, Fisher tests and a metrics summary", ["predictions"]),
}

FLAG_HELP = {
    "n_subjects": "number of phantom subjects", "manifest": "phantom manifest.csv",
    "template": "template density volume", "features": "features.csv from 'features'",
    "explicit": "explicit.csv from 'features'", "supervoxels": "supervoxel label volume",
    "pipeline": "fitted pipeline file", "predictions": "predictions.csv (report: label=path,...)",
    "target": "target name", "targets": "comma-separated target names or 'all'",
    "roi": "region of interest name", "axis": "ablation axis", "values": "comma list or 'standard'",
    "grid_size": "SLIC grid size", "subjects": "CSV of subject_id (and retained) to keep",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="heartmorph", description="Supervoxel morphology regression pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, (_, help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", action="append", default=[], metavar="FILE",
                       help="key = value file or run.json; may repeat")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                       help="override one config key; may repeat")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (1 is the reference run)")
        p.add_argument("--seed", type=int, help="model and SLIC seed")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag in flags:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, help=FLAG_HELP[flag])
    return parser


def resolve(args) -> RunConfig:
    cfg = RunConfig()
    for path in args.config:
        cfg.update(load_file(path))
    flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    cfg.update(flags)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.update({k.strip(): v.strip()})
    if cfg["threads"] < 1:
        raise ConfigError("key 'threads' must be >= 1")
    cfg.roi()  # validates against the vocabulary before any work
    return cfg


def write_run_json(cfg, command):
    out = _out(cfg)
    doc = {"subcommand": command, "version": __version__, "config": cfg.as_dict(),
           "seeds": {"seed": cfg["seed"], "eval.seed": cfg["eval.seed"], "phantom.seed": cfg["phantom.seed"]}}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        write_run_json(cfg, args.command)
        COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"heartmorph: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except HeartMorphError as exc:
        kind = {3: "data error", 4: "numerical failure"}.get(exc.exit_code, "error")
        print(f"heartmorph: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"heartmorph: data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
