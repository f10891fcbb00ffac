"""Command-line entry point: ``roimae <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from .harness import (
    ExperimentError,
    emit_report,
    find_subjects,
    load_config,
    load_report,
    read_label_csv,
    render_report,
    run_experiment,
    subject_id,
)
from .mae import TrainConfig, load_model, pretrain, save_model
from .masking import parse_strategy
from .nifti_io import NiftiError, load_volume, read_labels, write_v4d, write_volume
from .preprocess import PreprocessConfig, align_atlas, preprocess_volume, reference_grid
from .probe import evaluate, features_for, split_subjects, train_head
from .synth import PhantomConfig, write_dataset
from .volume import atlas_brain_mask, brain_mask


def _shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.lower().replace(",", "x").split("x"))


def _load_grouping(path):
    return atlas_mod.load_grouping(path) if path else atlas_mod.default_grouping()


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig(
        target_spacing_mm=args.spacing,
        target_shape=_shape(args.shape),
        target_tr_s=args.tr,
        background_rule=args.background,
    )
    atlas = read_labels(args.atlas) if args.atlas else None
    vol, aligned, brain = preprocess_volume(load_volume(args.input), cfg, atlas)
    out = Path(args.output)
    if out.name.endswith(".v4d"):
        write_v4d(vol, out)
    else:
        write_volume(vol, out)
    print(f"{args.input} -> {out}: {vol.data.shape}, {brain.popcount} brain voxels")
    return 0


def cmd_mask_stats(args) -> int:
    labels = read_labels(args.atlas)
    grouping = _load_grouping(args.grouping)
    if args.fmri:
        fmri = load_volume(args.fmri)
        labels = align_atlas(labels, fmri)
        brain = brain_mask(fmri)
    else:
        if args.shape:
            labels = align_atlas(labels, reference_grid(labels, args.spacing, _shape(args.shape)))
        brain = atlas_brain_mask(labels)
    rows = atlas_mod.mask_ratio_table(labels, grouping, brain)
    if args.output:
        atlas_mod.write_mask_ratio_csv(rows, args.output)
    for row in rows:
        print(f"{row['mask']:24s} {row['voxels']:8d} {row['percent']:7.2f}%")
    return 0


def cmd_synth(args) -> int:
    cfg = PhantomConfig(
        dims=_shape(args.dims),
        n_subjects_per_class=args.subjects,
        target_region=args.target_region,
        amplitude=args.amplitude,
        seed=args.seed,
    )
    out = write_dataset(cfg, args.out, args.format)
    print(f"wrote {2 * cfg.n_subjects_per_class} subjects to {out}")
    return 0


def _subject_paths(data_dir: Path, atlas_path: Path):
    paths = find_subjects(data_dir, exclude=[atlas_path])
    return [subject_id(p) for p in paths], paths


def cmd_pretrain(args) -> int:
    data_dir = Path(args.data_dir)
    atlas_path = Path(args.atlas or data_dir / "atlas.nii")
    labels = read_labels(atlas_path)
    grouping = _load_grouping(args.grouping or (data_dir / "grouping.txt" if (data_dir / "grouping.txt").exists() else None))
    _, paths = _subject_paths(data_dir, atlas_path)
    volumes = [load_volume(p) for p in paths]
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lr=args.lr,
        patch=_shape(args.patch),
        d_hidden=args.d_hidden,
        d_latent=args.d_latent,
    )
    result = pretrain(volumes, parse_strategy(args.strategy), cfg, labels, grouping)
    save_model(result.model, args.output)
    for epoch, loss in enumerate(result.losses):
        print(f"epoch {epoch:3d} loss {loss:.6f}")
    return 0


def cmd_probe(args) -> int:
    data_dir = Path(args.data_dir)
    atlas_path = Path(args.atlas or data_dir / "atlas.nii")
    ids, paths = _subject_paths(data_dir, atlas_path)
    label_map = read_label_csv(args.labels or data_dir / "labels.csv")
    model = load_model(args.model)
    X = features_for(model, [load_volume(p) for p in paths])
    y = np.array([label_map[s] for s in ids])
    split = split_subjects(ids, args.seed)
    part = {k: np.array([split[s] == k for s in ids]) for k in ("train", "val", "test")}
    head = train_head(X[part["train"]], y[part["train"]], X[part["val"]], y[part["val"]], seed=args.seed)
    acc, auc = evaluate(head, X[part["test"]], y[part["test"]])
    print(f"ACC {acc:.4f} AUCROC {auc:.4f} (head epoch {head.epoch})")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = Path(args.out_dir)
    report = run_experiment(cfg, workers=args.workers)
    for row in report.rows:
        if row.status == "ok":
            print(f"{row.label:32s} r{row.repeat} loss {row.recon_loss:.5f} acc {row.acc:.3f} auc {row.aucroc}")
        else:
            print(f"{row.label:32s} r{row.repeat} FAILED {row.error}")
    print(f"report written to {cfg.out_dir}")
    return 0 if report.all_ok else 1


def cmd_report(args) -> int:
    report = load_report(args.input)
    if args.output:
        emit_report(report, args.format, args.output)
    else:
        sys.stdout.write(render_report(report, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roimae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample, crop/pad and z-score one volume")
    p.add_argument("input")
    p.add_argument("output", help=".nii, .nii.gz or .v4d")
    p.add_argument("--atlas")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--shape", default="96x96x96")
    p.add_argument("--tr", type=float, default=0.8)
    p.add_argument("--background", choices=("intensity", "atlas"), default="intensity")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("mask-stats", help="voxel counts per macro region (CSV)")
    p.add_argument("--atlas", required=True)
    p.add_argument("--grouping", help="grouping file; defaults to the bundled AAL3 grouping")
    p.add_argument("--fmri", help="volume whose grid and intensity brain mask are used")
    p.add_argument("--spacing", type=float, default=2.0, help="with --shape: resample the atlas first")
    p.add_argument("--shape", help="e.g. 96x96x96; without it the atlas grid is used as is")
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_mask_stats)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=40, help="subjects per class")
    p.add_argument("--dims", default="16,16,16,24")
    p.add_argument("--target-region", type=int, default=6)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--format", choices=("v4d", "nii"), default="v4d")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain on every volume in a directory")
    p.add_argument("data_dir")
    p.add_argument("output", help="model file")
    p.add_argument("--mask", "--strategy", dest="strategy", default="random-tube:0.1")
    p.add_argument("--atlas")
    p.add_argument("--grouping")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--patch", default="4x4x4x24")
    p.add_argument("--d-hidden", type=int, default=64)
    p.add_argument("--d-latent", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="fit and evaluate a logistic head on frozen features")
    p.add_argument("data_dir")
    p.add_argument("model")
    p.add_argument("--atlas")
    p.add_argument("--labels")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("experiment", help="run a YAML experiment file")
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, default=None, help="processes; defaults to $ROIMAE_WORKERS or 1")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-emit a report.json as csv, json or markdown")
    p.add_argument("input")
    p.add_argument("--format", default="markdown")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ExperimentError, NiftiError, ValueError, OSError) as exc:
        print(f"roimae: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
