"""End-to-end runs: ground truth, CNN training, heatmaps, SVM baseline, overlap.

A run writes into its own directory and finishes with ``manifest.json``, which
lists every artifact with its SHA-256. The manifest holds no timestamps, so two
runs of one configuration produce identical manifests.
"""
from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ale as ale_mod
from . import attribution, evalx, models, svm, synthgen
from .volume import BinaryMask, Volume3D, read_nifti, write_nifti

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
METHOD_ORDER = ("LRP", "IG", "GGC", "SVM")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ManifestError(FileNotFoundError):
    pass


class IntegrityError(RuntimeError):
    pass


DEFAULTS = {
    "dataset": {
        "mode": "single",
        "dims": [32, 32, 32],
        "n": 2000,
        "effect_max": 2500.0,
        "noise_std": 2000.0,
        "smooth_fwhm": 4.0,
        "subjects": 50,
        "images_per_subject": 40,
        "lesion_voxels": None,
    },
    "models": [{"family": "D", "channels": 4, "variant": "reduced2"}],
    "train": {"max_epochs": 100, "patience": 10, "folds": 5, "batch_size": 4, "lr": 1e-4, "weight_decay": 1e-4},
    "attribution": {
        "methods": ["LRP", "IG", "GGC"],
        "ig_steps": 50,
        "lrp_beta": 0.5,
        "abs_first": False,
        "max_subjects_per_fold": None,
        "target_class": 1,
    },
    "svm": {"enabled": True, "c_grid": list(svm.C_GRID), "standardize": True},
    "ground_truth": {"source": "lesion"},
    "evaluation": {"fwhm_levels": list(evalx.FWHM_LEVELS), "n_thresholds": evalx.N_THRESHOLDS},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)


def validate_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Fill defaults and check the run description before any computation."""
    if not isinstance(raw, dict):
        raise ConfigError("the run file must hold a JSON object")
    if "seed" not in raw:
        raise ConfigError("'seed' is mandatory")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("'seed' must be an integer")
    if not isinstance(raw.get("dataset"), dict) or not ({"path", "mode"} & set(raw["dataset"])):
        raise ConfigError("'dataset' must give either a 'path' or a synthetic 'mode'")
    unknown = set(raw) - set(DEFAULTS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    base_dir = Path(base_dir or ".")

    def resolve(p, what):
        path = Path(p)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"{what} path {p!r} does not exist")
        return str(path.resolve())

    ds = cfg["dataset"]
    if "path" in raw.get("dataset", {}):
        ds["path"] = resolve(ds["path"], "dataset")
        if not (Path(ds["path"]) / synthgen.META_FILE).exists():
            raise ConfigError(f"dataset directory {ds['path']} has no {synthgen.META_FILE}")
    else:
        if ds["mode"] not in ("single", "cohort"):
            raise ConfigError("dataset.mode must be 'single' or 'cohort'")
        if len(ds["dims"]) != 3:
            raise ConfigError("dataset.dims needs three values")
        if ds["mode"] == "single" and (ds["n"] < 2 or ds["n"] % 2):
            raise ConfigError("dataset.n must be even and >= 2")
    if not cfg["models"]:
        raise ConfigError("at least one model is required")
    for m in cfg["models"]:
        try:
            models.ModelSpec(m["family"], int(m["channels"]), m.get("variant", "full"), (8, 8, 8))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad model entry {m}: {exc}") from exc
    try:
        t = cfg["train"]
        models.TrainConfig(t["lr"], t["weight_decay"], t["max_epochs"], t["patience"], t["folds"], 0, t["batch_size"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad train section: {exc}") from exc
    methods = [m.upper() for m in cfg["attribution"]["methods"]]
    if set(methods) - {"LRP", "IG", "GGC"}:
        raise ConfigError(f"unknown attribution methods in {methods}")
    cfg["attribution"]["methods"] = methods
    gt = cfg["ground_truth"]
    if gt.get("source") == "ale":
        for key in ("foci", "mask"):
            if key not in gt:
                raise ConfigError(f"ground_truth.{key} is required for an ALE ground truth")
            gt[key] = resolve(gt[key], f"ground_truth.{key}")
    elif gt.get("source") == "mask":
        gt["path"] = resolve(gt.get("path", ""), "ground_truth.path")
    elif gt.get("source") != "lesion":
        raise ConfigError("ground_truth.source must be 'lesion', 'mask' or 'ale'")
    return RunConfig(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return validate_config(raw, path.parent)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def new_run_dir(root) -> Path:
    root = Path(root)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    path = root / f"run-{stamp}"
    k = 1
    while path.exists():
        path = root / f"run-{stamp}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


def _load_data(cfg: RunConfig):
    ds = cfg.section("dataset")
    if "path" in ds:
        disk = synthgen.read_dataset(ds["path"])
        X = disk.stack()
        tmpl = disk.image(0)
        return X, disk.labels, disk.subjects, disk.lesion(), tmpl
    spec = synthgen.PhantomSpec(tuple(ds["dims"]), lesion_voxels=ds["lesion_voxels"], seed=cfg.seed)
    if ds["mode"] == "single":
        data = synthgen.gen_single_subject(
            spec, ds["n"], ds["effect_max"], ds["noise_std"], ds["smooth_fwhm"], seed=cfg.seed
        )
        groups = None
    else:
        data = synthgen.gen_whole_cohort(
            spec, ds["subjects"], ds["images_per_subject"], ds["effect_max"], ds["noise_std"], ds["smooth_fwhm"],
            seed=cfg.seed,
        )
        groups = data.subjects
    X = data.stack()
    tmpl = Volume3D(np.zeros(spec.dims), spec.spacing_mm)
    return X, data.labels, groups, data.lesion, tmpl


def run_pipeline(cfg: RunConfig, out_root, run_dir: Path | None = None) -> Path:
    """Execute every stage and return the run directory."""
    run = run_dir or new_run_dir(out_root)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(cfg.canonical())
    seed = cfg.seed

    with _Stage("data"):
        X, y, groups, lesion, tmpl = _load_data(cfg)
        dims = tuple(X.shape[1:])

    with _Stage("ground-truth"):
        gt = cfg.section("ground_truth")
        if gt["source"] == "lesion":
            if lesion is None:
                raise ValueError("dataset has no lesion mask")
            truth = lesion
        elif gt["source"] == "mask":
            truth = BinaryMask.from_volume(read_nifti(gt["path"]))
        else:
            gm = BinaryMask.from_volume(read_nifti(gt["mask"]))
            table = ale_mod.parse_foci(gt["foci"])
            res = ale_mod.permutation_threshold(
                table, gm.to_volume(), gm, gt.get("n_perm", 1000), gt.get("p_voxel", 0.001),
                gt.get("p_cluster", 0.05), seed=seed,
            )
            write_nifti(res.ale, run / "ale.nii")
            (run / "ale_clusters.json").write_text(res.to_json())
            truth = res.mask
        if truth.dims != dims:
            raise ValueError(f"ground truth grid {truth.dims} differs from data grid {dims}")
        write_nifti(truth.to_volume(), run / "truth.nii")

    tc = cfg.section("train")
    train_cfg = models.TrainConfig(
        tc["lr"], tc["weight_decay"], tc["max_epochs"], tc["patience"], tc["folds"], seed, tc["batch_size"]
    )
    splits = models.kfold_split(len(y), train_cfg.folds, seed, groups=groups)
    (run / "splits.json").write_text(
        json.dumps([{k: getattr(f, k).tolist() for k in ("train", "val", "test")} for f in splits])
    )
    summary: dict = {"models": {}, "methods": {}}

    with _Stage("train"):
        best = None
        for m in cfg.section("models"):
            spec = models.ModelSpec(m["family"], int(m["channels"]), m.get("variant", "full"), dims)
            report, fold_models, _ = models.train_cv(X, y, spec, train_cfg, splits=splits)
            (run / f"cv_{spec.name}.json").write_text(report.to_json())
            summary["models"][spec.name] = report.mean_accuracy
            if best is None or report.mean_accuracy > best[0].mean_accuracy:
                best = (report, fold_models, spec)
        report, fold_models, spec = best
        for f, model in enumerate(fold_models):
            models.save_model(model, run / f"{spec.name}_fold{f}.ckpt")
        summary["best_model"] = spec.name
        summary["best_cnn_accuracy"] = report.mean_accuracy

    heatmaps: dict = {}
    ac = cfg.section("attribution")
    with _Stage("attribute"):
        for method in ac["methods"]:
            maps = []
            for fold, model in zip(splits, fold_models):
                idx = fold.test
                if ac["max_subjects_per_fold"]:
                    idx = idx[: ac["max_subjects_per_fold"]]
                kw = {"steps": ac["ig_steps"]} if method == "IG" else {"beta": ac["lrp_beta"]} if method == "LRP" else {}
                maps.append(attribution.attribute_batch(model, X[idx], method, ac["target_class"], **kw))
            avg = attribution.average_heatmaps(np.concatenate(maps), abs_first=ac["abs_first"], method=method)
            hm = attribution.Heatmap(tmpl.like(avg.volume.data), method, avg.n_subjects_averaged)
            write_nifti(hm.volume, run / f"heatmap_{method}.nii")
            heatmaps[method] = hm

    sc = cfg.section("svm")
    if sc["enabled"]:
        with _Stage("svm"):
            full = BinaryMask(np.ones(dims, dtype=bool), tmpl.spacing_mm, tmpl.origin_mm)
            feats = svm.masked_features(X, full)
            grid = svm.svm_grid_cv(feats, y, splits, sc["c_grid"], standardize=sc["standardize"])
            (run / "svm_report.json").write_text(grid.to_json())
            final = svm.train_svm(feats, y, grid.best_C, standardize=sc["standardize"])
            hm = svm.coefficient_map(final, full)
            write_nifti(hm.volume, run / "heatmap_SVM.nii")
            heatmaps["SVM"] = hm
            summary["best_svm_accuracy"] = grid.best_accuracy
            summary["best_svm_C"] = grid.best_C

    ec = cfg.section("evaluation")
    with _Stage("evaluate"):
        reports = []
        for method in METHOD_ORDER:
            if method not in heatmaps:
                continue
            rep = evalx.dice_grid(heatmaps[method], truth, ec["fwhm_levels"], ec["n_thresholds"], method=method)
            (run / f"overlap_{method}.json").write_text(rep.to_json())
            rep.write_csv(run / f"overlap_{method}.csv")
            reports.append(rep)
            summary["methods"][method] = rep.best()
        table = evalx.best_smoothing_table(reports)
        summary["best_smoothing"] = table
        (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    write_manifest(run)
    return run


def write_manifest(run: Path) -> Path:
    files = sorted(p for p in run.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {"files": {str(p.relative_to(run)): sha256_file(p) for p in files}}
    path = run / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(run) -> dict:
    path = Path(run) / MANIFEST
    if not path.exists():
        raise ManifestError(f"no {MANIFEST} in {run}")
    try:
        manifest = json.loads(path.read_text())
        files = manifest["files"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path} is corrupt") from exc
    if not isinstance(files, dict):
        raise ManifestError(f"{path} is corrupt")
    return manifest


def verify_manifest(run) -> dict:
    run = Path(run)
    manifest = read_manifest(run)
    for rel, digest in manifest["files"].items():
        p = run / rel
        if not p.exists():
            raise IntegrityError(f"{rel}: listed in the manifest but missing")
        if sha256_file(p) != digest:
            raise IntegrityError(f"{rel}: content hash does not match the manifest")
    return manifest


def build_report(run) -> str:
    """Human-readable summary built only from manifest-listed, verified files."""
    run = Path(run)
    manifest = verify_manifest(run)
    listed = manifest["files"]
    reports = []
    for method in METHOD_ORDER:
        name = f"overlap_{method}.json"
        if name in listed:
            reports.append(evalx.OverlapReport.from_dict(json.loads((run / name).read_text())))
    if not reports:
        raise IntegrityError("the manifest lists no overlap reports")
    lines = [f"run: {run}", ""]
    lines.append(evalx.format_table(evalx.best_smoothing_table(reports)))
    lines.append("")
    for r in reports:
        n_f, n_t = r.shape
        lines.append(f"{r.method}: grid {n_f} smoothings x {n_t} thresholds = {n_f * n_t} binary maps")
    if "summary.json" in listed:
        s = json.loads((run / "summary.json").read_text())
        lines.append("")
        for name, acc in sorted(s.get("models", {}).items()):
            lines.append(f"{name}: cross-validated accuracy {acc:.4f}")
        if "best_svm_accuracy" in s:
            lines.append(f"SVM (C={s['best_svm_C']:g}): accuracy {s['best_svm_accuracy']:.4f}")
    return "\n".join(lines)
