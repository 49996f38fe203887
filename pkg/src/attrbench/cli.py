"""Command-line entry point: ``attrbench <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.fft
from threadpoolctl import threadpool_limits

from . import ale as ale_mod
from . import attribution, evalx, models, pipeline, svm, synthgen
from .nn.serialize import CheckpointError
from .volume import BinaryMask, NiftiError, Volume3D, read_nifti, write_nifti

log = logging.getLogger("attrbench")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class UsageError(Exception):
    pass


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    return Path(args.out)


def cmd_gen_synthetic(args) -> int:
    spec = synthgen.PhantomSpec(tuple(args.dims), lesion_voxels=args.lesion_voxels, seed=args.seed)
    if args.mode == "single":
        ds = synthgen.gen_single_subject(spec, args.n, args.effect_max, args.noise_std, args.smooth_fwhm, args.seed)
    else:
        ds = synthgen.gen_whole_cohort(
            spec, args.subjects, args.images_per_subject, args.effect_max, args.noise_std, args.smooth_fwhm, args.seed
        )
    out = synthgen.write_dataset(ds, _out(args))
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def _train_config(args) -> models.TrainConfig:
    return models.TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, max_epochs=args.max_epochs, patience=args.patience,
        folds=args.folds, seed=args.seed, batch_size=args.batch_size,
    )


def cmd_train(args) -> int:
    data = synthgen.read_dataset(args.data)
    X = data.stack()
    cfg = _train_config(args)
    spec = models.ModelSpec(args.family, args.channels, args.variant, X.shape[1:])
    groups = data.subjects if len(np.unique(data.subjects)) > 1 else None
    report, fold_models, splits = models.train_cv(X, data.labels, spec, cfg, groups=groups)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    for f, m in enumerate(fold_models):
        models.save_model(m, out / f"{spec.name}_fold{f}.ckpt")
    (out / "cv_report.json").write_text(report.to_json())
    (out / "splits.json").write_text(
        json.dumps([{k: getattr(f, k).tolist() for k in ("train", "val", "test")} for f in splits])
    )
    print(report.to_json())
    return EXIT_OK


def cmd_attribute(args) -> int:
    data = synthgen.read_dataset(args.scans)
    tmpl = data.image(0)
    X = data.stack()
    maps = []
    for ckpt in args.ckpt:
        model = models.load_model(ckpt)
        kw = {"steps": args.steps} if args.method == "IG" else {}
        maps.append(attribution.attribute_batch(model, X, args.method, args.target_class, **kw))
    stack = np.concatenate(maps)
    if args.keep_individual:
        keep = Path(args.keep_individual)
        keep.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(stack):
            write_nifti(tmpl.like(m), keep / f"{args.method}_{i:05d}.nii")
    avg = attribution.average_heatmaps(stack, abs_first=args.abs_first, method=args.method)
    write_nifti(tmpl.like(avg.volume.data), _out(args))
    print(f"averaged {avg.n_subjects_averaged} {args.method} maps into {args.out}")
    return EXIT_OK


def cmd_svm(args) -> int:
    data = synthgen.read_dataset(args.data)
    X = data.stack()
    tmpl = data.image(0)
    if args.mask:
        mask = BinaryMask.from_volume(read_nifti(args.mask))
    else:
        mask = BinaryMask(np.ones(tmpl.dims, dtype=bool), tmpl.spacing_mm, tmpl.origin_mm)
    feats = svm.masked_features(X, mask)
    groups = data.subjects if len(np.unique(data.subjects)) > 1 else None
    splits = models.kfold_split(len(data), args.folds, args.seed, groups=groups)
    report = svm.svm_grid_cv(feats, data.labels, splits)
    final = svm.train_svm(feats, data.labels, report.best_C, standardize=True)
    write_nifti(svm.coefficient_map(final, mask).volume, _out(args))
    if args.report:
        Path(args.report).write_text(report.to_json())
    print(f"best C={report.best_C:g} accuracy={report.best_accuracy:.4f}")
    return EXIT_OK


def cmd_ale(args) -> int:
    table = ale_mod.parse_foci(args.foci)
    gm = BinaryMask.from_volume(read_nifti(args.mask))
    res = ale_mod.permutation_threshold(
        table, gm.to_volume(), gm, args.n_perm, args.p_voxel, args.p_cluster, seed=args.seed
    )
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(res.ale, out / "ale.nii")
    write_nifti(res.mask.to_volume(), out / "ale_binary.nii")
    ale_mod.write_cluster_report(res, out / "clusters.json")
    print(f"{len(res.clusters)} clusters, {res.mask.voxel_count()} voxels kept")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    hm = read_nifti(args.heatmap)
    truth = BinaryMask.from_volume(read_nifti(args.truth))
    rep = evalx.dice_grid(hm, truth, method=args.method)
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json())
    rep.write_csv(out.with_suffix(".csv"))
    if args.curves_fwhm is not None:
        evalx.write_curves(hm, truth, args.curves_fwhm, out.with_suffix(""))
    best = rep.best()
    print(f"{args.method}: best Dice {best['dice']:.4f} at FWHM {best['fwhm']} mm")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = pipeline.load_config(args.config)
    if args.seed_given:
        cfg.raw["seed"] = args.seed
    run = pipeline.run_pipeline(cfg, _out(args))
    print(run)
    return EXIT_OK


def cmd_report(args) -> int:
    print(pipeline.build_report(args.run_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for BLAS and FFT")
    common.add_argument("--out", default=None, help="output path")
    common.add_argument("--config", default=None, help="JSON file whose keys fill in flag defaults")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="attrbench", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic lesion dataset")
    g.add_argument("--mode", choices=["single", "cohort"], default="single")
    g.add_argument("--n", type=int, default=10000, help="images (single mode)")
    g.add_argument("--subjects", type=int, default=250)
    g.add_argument("--images-per-subject", type=int, default=40)
    g.add_argument("--dims", type=int, nargs=3, default=list(synthgen.DEFAULT_DIMS))
    g.add_argument("--lesion-voxels", type=float, default=None, help="voxels per lesion ellipsoid (default 350)")
    g.add_argument("--effect-max", type=float, default=2500.0)
    g.add_argument("--noise-std", type=float, default=2000.0)
    g.add_argument("--smooth-fwhm", type=float, default=4.0)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", parents=[common], help="cross-validate a CNN")
    t.add_argument("--data", required=True)
    t.add_argument("--family", choices=models.FAMILIES, default="B")
    t.add_argument("--channels", type=int, default=44)
    t.add_argument("--variant", choices=models.VARIANTS, default="full")
    t.add_argument("--max-epochs", type=int, default=100)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attribute", parents=[common], help="average heatmaps over scans")
    a.add_argument("--ckpt", nargs="+", required=True)
    a.add_argument("--method", type=str.upper, choices=["LRP", "IG", "GGC"], required=True)
    a.add_argument("--scans", required=True)
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--target-class", type=int, default=1)
    a.add_argument("--abs-first", action="store_true", help="take absolute values before averaging")
    a.add_argument("--keep-individual", default=None, help="directory for per-scan maps")
    a.set_defaults(func=cmd_attribute)

    s = sub.add_parser("svm", parents=[common], help="linear SVM grid search and coefficient map")
    s.add_argument("--data", required=True)
    s.add_argument("--mask", default=None)
    s.add_argument("--report", default=None)
    s.add_argument("--folds", type=int, default=5)
    s.set_defaults(func=cmd_svm)

    e = sub.add_parser("ale", parents=[common], help="permutation-thresholded ALE map")
    e.add_argument("--foci", required=True)
    e.add_argument("--mask", required=True, help="grey-matter mask defining the grid")
    e.add_argument("--n-perm", type=int, default=1000)
    e.add_argument("--p-voxel", type=float, default=0.001)
    e.add_argument("--p-cluster", type=float, default=0.05)
    e.set_defaults(func=cmd_ale)

    v = sub.add_parser("evaluate", parents=[common], help="Dice grid, ROC and PR against a truth mask")
    v.add_argument("--heatmap", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--method", default="heatmap")
    v.add_argument("--curves-fwhm", type=float, default=None)
    v.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("pipeline", parents=[common], help="run every stage from a run file")
    pl.add_argument("run_file", nargs="?", default=None)
    pl.set_defaults(func=cmd_pipeline)

    r = sub.add_parser("report", parents=[common], help="summarize a pipeline run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def _apply_config_file(parser, args, argv):
    """Values from ``--config`` fill in any flag not given on the command line."""
    if args.command == "pipeline":
        args.config = args.run_file or args.config
        if args.config is None:
            raise pipeline.ConfigError("pipeline needs a run file")
        return args
    if args.config is None:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise pipeline.ConfigError(f"cannot read {args.config}: {exc}") from exc
    given = {tok.split("=")[0].lstrip("-").replace("-", "_") for tok in argv if tok.startswith("--")}
    for key, val in values.items():
        dest = key.replace("-", "_")
        if dest not in given and hasattr(args, dest):
            setattr(args, dest, val)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    args.seed_given = args.seed is not None
    try:
        args = _apply_config_file(parser, args, argv)
        if args.seed is None:
            args.seed = 0
        limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
        workers = scipy.fft.set_workers(args.threads) if args.threads else contextlib.nullcontext()
        with limits, workers:
            return args.func(args)
    except (pipeline.ConfigError, UsageError, pipeline.ManifestError, FileNotFoundError, NiftiError,
            CheckpointError, ale_mod.FociParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except pipeline.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
