"""Experiment orchestration: preprocess -> pretrain -> probe per masking strategy.

Every (strategy, repeat) cell shares the subject split, the model
initialisation and the data order of its repeat; only the masks differ, so
differences between rows isolate the masking strategy.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .atlas import GroupingTable, load_grouping
from .mae import TrainConfig, forward, load_model, masked_mse, pretrain, save_model
from .masking import MaskStrategy, apply_mask, generate_mask, parse_strategy
from .nifti_io import load_volume, read_labels
from .preprocess import PreprocessConfig, crop_or_pad, crop_or_pad_labels, preprocess_volume
from .probe import evaluate, features_for, split_subjects, train_head
from .rng import derive_seed
from .volume import LabelVolume, Mask3D

log = logging.getLogger(__name__)

WORKERS_ENV = "ROIMAE_WORKERS"

FOOTNOTE = (
    "Reconstruction losses are not comparable between ROI rows: each strategy hides a "
    "different number of voxels, and larger regions tend to give larger errors."
)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-3
    epochs: int = 500
    lr: float = 0.1


@dataclass
class ExperimentConfig:
    data_dir: Path
    atlas: Path
    grouping: Path
    strategies: list
    out_dir: Path
    labels: Path | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 42
    repeats: int = 1

    def __post_init__(self):
        if not self.strategies:
            raise ExperimentError("an experiment needs at least one mask strategy")
        if self.repeats < 1:
            raise ExperimentError("repeats must be at least 1")
        for name in ("data_dir", "atlas", "grouping", "out_dir"):
            setattr(self, name, Path(getattr(self, name)))
        self.labels = Path(self.labels) if self.labels else self.data_dir / "labels.csv"
        for s in self.strategies:
            parse_strategy(s)


def load_config(path) -> ExperimentConfig:
    """Read a YAML experiment file. Relative paths resolve against its directory."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    base = path.parent

    def resolve(p):
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    data_dir = resolve(raw.get("data_dir", "."))
    pre = raw.get("preprocess", {}) or {}
    train = raw.get("train", {}) or {}
    probe = raw.get("probe", {}) or {}
    pre_cfg = PreprocessConfig(
        target_spacing_mm=float(pre.get("spacing", 2.0)),
        target_shape=tuple(pre.get("shape", (96, 96, 96))),
        target_tr_s=float(pre.get("tr", 0.8)),
        zscore_epsilon=float(pre.get("epsilon", 1e-8)),
        background_rule=pre.get("background", "intensity"),
    )
    train_keys = {f.name for f in fields(TrainConfig)} - {"seed"}
    unknown = set(train) - train_keys
    if unknown:
        raise ExperimentError(f"unknown train settings: {', '.join(sorted(unknown))}")
    if "patch" in train:
        train["patch"] = tuple(train["patch"])
    for key in ("lr", "weight_decay", "fill"):
        if key in train:
            train[key] = float(train[key])
    return ExperimentConfig(
        data_dir=data_dir,
        atlas=resolve(raw.get("atlas")) or data_dir / "atlas.nii",
        grouping=resolve(raw.get("grouping")) or data_dir / "grouping.txt",
        labels=resolve(raw.get("labels")),
        strategies=list(raw.get("strategies", [])),
        out_dir=resolve(raw.get("out_dir", "results")),
        preprocess=pre_cfg,
        train=TrainConfig(**train),
        probe=ProbeConfig(**{k: float(v) if k != "epochs" else int(v) for k, v in probe.items()}),
        seed=int(raw.get("seed", 42)),
        repeats=int(raw.get("repeats", 1)),
    )


def dump_config(cfg: ExperimentConfig, path) -> None:
    train = asdict(cfg.train)
    train.pop("seed")
    train["patch"] = list(train["patch"])
    doc = {
        "data_dir": str(cfg.data_dir),
        "atlas": str(cfg.atlas),
        "grouping": str(cfg.grouping),
        "labels": str(cfg.labels),
        "out_dir": str(cfg.out_dir),
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "strategies": list(cfg.strategies),
        "preprocess": {
            "spacing": cfg.preprocess.target_spacing_mm,
            "shape": list(cfg.preprocess.target_shape),
            "tr": cfg.preprocess.target_tr_s,
            "epsilon": cfg.preprocess.zscore_epsilon,
            "background": cfg.preprocess.background_rule,
        },
        "train": train,
        "probe": asdict(cfg.probe),
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


# --- data loading ------------------------------------------------------------

_VOLUME_SUFFIXES = (".nii.gz", ".nii", ".v4d")


def subject_id(path: Path) -> str:
    name = path.name
    for suffix in _VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def read_label_csv(path) -> dict:
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            value = int(row["label"])
            if value not in (0, 1):
                raise ExperimentError(f"{path}: label for {row['subject_id']} must be 0 or 1, got {value}")
            labels[row["subject_id"]] = value
    return labels


def find_subjects(data_dir, exclude=()) -> list[Path]:
    data_dir = Path(data_dir)
    exclude = {Path(p).resolve() for p in exclude}
    found = []
    for path in sorted(data_dir.iterdir()):
        if path.name.endswith(_VOLUME_SUFFIXES) and path.resolve() not in exclude and subject_id(path) != "atlas":
            found.append(path)
    if not found:
        raise ExperimentError(f"no subject volumes in {data_dir}")
    return found


def fit_to_patch(vol, labels: LabelVolume | None, brain: Mask3D | None, patch):
    """Zero-pad space up to a multiple of the patch and drop trailing frames."""
    px, py, pz, pt = patch
    shape = tuple(-(-n // p) * p for n, p in zip(vol.dims.spatial, (px, py, pz)))
    nt = (vol.dims.nt // pt) * pt
    if nt == 0:
        raise ExperimentError(f"volume has {vol.dims.nt} frames, fewer than the temporal patch {pt}")
    out = crop_or_pad(vol, shape)
    if nt != vol.dims.nt:
        out = out.replace(out.data[..., :nt])
    if labels is not None:
        labels = crop_or_pad_labels(labels, shape)
    if brain is not None:
        brain = Mask3D(crop_or_pad_labels(LabelVolume(brain.bits.astype(np.uint16)), shape).labels != 0)
    return out, labels, brain


@dataclass
class PreparedData:
    ids: list
    volumes: list
    brains: list
    labels: list
    atlas: LabelVolume
    grouping: GroupingTable


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    atlas = read_labels(cfg.atlas)
    grouping = load_grouping(cfg.grouping)
    label_map = read_label_csv(cfg.labels)
    paths = find_subjects(cfg.data_dir, exclude=[cfg.atlas])
    ids, volumes, brains, labels = [], [], [], []
    aligned = None
    for path in paths:
        sid = subject_id(path)
        if sid not in label_map:
            raise ExperimentError(f"subject {sid} has no entry in {cfg.labels}")
        vol, sub_atlas, brain = preprocess_volume(load_volume(path), cfg.preprocess, atlas)
        vol, sub_atlas, brain = fit_to_patch(vol, sub_atlas, brain, cfg.train.patch)
        if aligned is None:
            aligned = sub_atlas
        elif vol.data.shape != volumes[0].data.shape:
            raise ExperimentError(f"subject {sid} preprocesses to {vol.data.shape}, others to {volumes[0].data.shape}")
        ids.append(sid)
        volumes.append(vol)
        brains.append(brain)
        labels.append(label_map[sid])
    return PreparedData(ids, volumes, brains, labels, aligned, grouping)


# --- report ------------------------------------------------------------------

ROW_FIELDS = (
    "strategy",
    "label",
    "repeat",
    "sub_seed",
    "status",
    "recon_loss",
    "final_epoch_loss",
    "acc",
    "aucroc",
    "masked_voxels",
    "masked_percent",
    "brain_percent",
    "error",
)


@dataclass
class ReportRow:
    strategy: str
    label: str
    repeat: int
    sub_seed: int
    status: str = "ok"
    recon_loss: float | None = None
    final_epoch_loss: float | None = None
    acc: float | None = None
    aucroc: float | None = None
    masked_voxels: int | None = None
    masked_percent: float | None = None
    brain_percent: float | None = None
    error: str = ""


@dataclass
class ExperimentReport:
    rows: list

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if r.status == "ok"]

    @property
    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def strategies(self) -> list:
        seen = []
        for r in self.rows:
            if r.strategy not in seen:
                seen.append(r.strategy)
        return seen

    def aggregate(self) -> list[dict]:
        """Mean and sample std over successful repeats, per strategy."""
        out = []
        for s in self.strategies():
            rows = [r for r in self.ok_rows if r.strategy == s]
            if not rows:
                continue
            agg = {"strategy": s, "label": rows[0].label, "n": len(rows)}
            for key in ("recon_loss", "final_epoch_loss", "acc", "aucroc"):
                values = np.array([getattr(r, key) for r in rows if getattr(r, key) is not None], dtype=np.float64)
                agg[f"{key}_mean"] = float(values.mean()) if values.size else None
                agg[f"{key}_std"] = float(values.std(ddof=1)) if values.size > 1 else (0.0 if values.size else None)
            out.append(agg)
        return out

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "aggregate": self.aggregate(), "footnote": FOOTNOTE}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        return cls([ReportRow(**r) for r in doc["rows"]])

    def __eq__(self, other):
        return isinstance(other, ExperimentReport) and self.rows == other.rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROW_FIELDS)
    for r in report.rows:
        writer.writerow([_fmt(getattr(r, f)) for f in ROW_FIELDS])
    return buf.getvalue()


def _pm(mean, std, scale=1.0, digits=4) -> str:
    if mean is None:
        return "n/a"
    text = f"{scale * mean:.{digits}f}"
    if std:
        text += f" ± {scale * std:.{digits}f}"
    return text


def report_markdown(report: ExperimentReport) -> str:
    lines = ["| Mask | Reconstruction loss* | ACC | AUCROC |", "|---|---|---|---|"]
    for agg in report.aggregate():
        lines.append(
            "| {} | {} | {}% | {} |".format(
                agg["label"],
                _pm(agg["recon_loss_mean"], agg["recon_loss_std"]),
                _pm(agg["acc_mean"], agg["acc_std"], 100.0, 2),
                _pm(agg["aucroc_mean"], agg["aucroc_std"], 1.0, 3),
            )
        )
    n = max((a["n"] for a in report.aggregate()), default=0)
    lines += ["", f"Values are mean ± std over {n} repeat(s).", "", f"*{FOOTNOTE}"]
    return "\n".join(lines) + "\n"


def render_report(report: ExperimentReport, fmt: str) -> str:
    if fmt not in ("csv", "json", "markdown"):
        raise ExperimentError(f"unknown report format {fmt!r}; expected csv, json or markdown")
    if not report.ok_rows:
        raise ExperimentError("report has no successful rows; nothing to write")
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2) + "\n"
    else:
        text = report_markdown(report)
    return text


def emit_report(report: ExperimentReport, fmt: str, path) -> Path:
    """Render ``report`` and write it; nothing is written when rendering fails."""
    text = render_report(report, fmt)
    path = Path(path)
    path.write_text(text)
    return path


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


# --- running -------------------------------------------------------------------


def repeat_seed(global_seed: int, repeat: int) -> int:
    """Training seed shared by every strategy within one repeat."""
    return derive_seed(global_seed, "repeat", repeat)


def eval_mask_seed(sub_seed: int, subject_index: int) -> int:
    return derive_seed(sub_seed, "eval-mask", subject_index)


def model_path(out_dir, strategy: MaskStrategy, repeat: int) -> Path:
    slug = re.sub(r"[^A-Za-z0-9]+", "-", strategy.spec()).strip("-")
    return Path(out_dir) / "models" / f"{slug}_r{repeat}.bin"


def reconstruction_loss(model, data: PreparedData, indices, strategy: MaskStrategy, sub_seed: int):
    """Mean masked MSE of ``model`` over ``indices`` with regenerated eval masks.

    Also returns the first subject's mask for the masked-voxel columns.
    """
    losses, first = [], None
    for j in indices:
        mask = generate_mask(
            strategy.with_seed(eval_mask_seed(sub_seed, j)),
            data.volumes[j].dims,
            data.atlas,
            data.brains[j],
            data.grouping,
        )
        first = first or (j, mask)
        recon = forward(model, apply_mask(data.volumes[j], mask))
        losses.append(masked_mse(recon, data.volumes[j], mask))
    return float(np.mean(losses)), first


def run_cell(cfg: ExperimentConfig, data: PreparedData, split: dict, strategy_text: str, repeat: int) -> ReportRow:
    strategy = parse_strategy(strategy_text)
    sub_seed = repeat_seed(cfg.seed, repeat)
    row = ReportRow(strategy=strategy.spec(), label=strategy.label(), repeat=repeat, sub_seed=sub_seed)
    try:
        train_idx = [i for i, s in enumerate(data.ids) if split[s] == "train"]
        val_idx = [i for i, s in enumerate(data.ids) if split[s] == "val"]
        test_idx = [i for i, s in enumerate(data.ids) if split[s] == "test"]
        train_cfg = TrainConfig(**{**asdict(cfg.train), "seed": sub_seed})
        result = pretrain(
            [data.volumes[i] for i in train_idx],
            strategy,
            train_cfg,
            data.atlas,
            data.grouping,
            [data.brains[i] for i in train_idx],
        )
        path = model_path(cfg.out_dir, strategy, repeat)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(result.model, path)
        model = load_model(path)

        features = features_for(model, data.volumes)
        y = np.asarray(data.labels)
        head = train_head(
            features[train_idx], y[train_idx], features[val_idx], y[val_idx],
            l2=cfg.probe.l2, epochs=cfg.probe.epochs, lr=cfg.probe.lr, seed=sub_seed,
        )
        acc, auc = evaluate(head, features[test_idx], y[test_idx])
        recon, (j, mask) = reconstruction_loss(model, data, test_idx, strategy, sub_seed)
        brain = data.brains[j]
        row.recon_loss = recon
        row.final_epoch_loss = float(result.losses[-1])
        row.acc = acc
        row.aucroc = None if math.isnan(auc) else auc
        row.masked_voxels = mask.popcount
        row.masked_percent = 100.0 * mask.popcount / mask.dims.size
        brain_frames = brain.popcount * mask.dims.nt
        inside = int(np.count_nonzero(mask.bits & brain.bits[..., None]))
        row.brain_percent = 100.0 * inside / brain_frames if brain_frames else None
        if not all(math.isfinite(v) for v in (row.recon_loss, row.final_epoch_loss, row.acc)):
            raise ExperimentError("non-finite metric")
    except Exception as exc:  # one failed cell must not sink the others
        log.error("cell %s repeat %d failed: %s", strategy_text, repeat, exc)
        row = ReportRow(strategy=row.strategy, label=row.label, repeat=repeat, sub_seed=sub_seed,
                        status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _run_cell_job(args):
    return run_cell(*args)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    """Run every (strategy, repeat) cell and write report.{csv,json,md} to ``cfg.out_dir``."""
    for p in (cfg.data_dir, cfg.atlas, cfg.grouping, cfg.labels):
        if not Path(p).exists():
            raise ExperimentError(f"{p} does not exist")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    split = split_subjects(data.ids, cfg.seed)
    jobs = [(cfg, data, split, s, r) for s in cfg.strategies for r in range(cfg.repeats)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_job, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    report = ExperimentReport(rows)
    if report.ok_rows:
        emit_report(report, "csv", cfg.out_dir / "report.csv")
        emit_report(report, "json", cfg.out_dir / "report.json")
        emit_report(report, "markdown", cfg.out_dir / "report.md")
    with open(cfg.out_dir / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "split"])
        writer.writerows((sid, split[sid]) for sid in data.ids)
    return report
