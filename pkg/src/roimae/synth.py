"""Synthetic 4D phantoms with a block atlas and a class signal confined to one region.

Every brain voxel carries ``baseline + shared sinusoid + AR(1) noise``.
Class-1 subjects additionally carry ``amplitude * sin(2*pi * 2f * t * TR)``
inside the target region, so the classes differ in spectrum rather than in
mean and the difference survives z-scoring.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .atlas import GROUP_NAMES, GroupingTable, RegionGroup
from .nifti_io import write_labels, write_v4d, write_volume
from .rng import keyed_generator
from .volume import LabelVolume, Volume4D


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int, int] = (16, 16, 16, 24)
    n_regions: int = 7
    target_region: int = 6
    margin: int = 2
    amplitude: float = 1.0
    base_freq_hz: float = 0.1
    base_amplitude: float = 1.0
    baseline: float = 10.0
    noise_std: float = 1.0
    ar_coef: float = 0.5
    n_subjects_per_class: int = 40
    spacing_mm: float = 2.0
    tr_s: float = 0.8
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ValueError(f"dims must be four positive ints, got {self.dims}")
        if self.n_regions < 1:
            raise ValueError("n_regions must be at least 1")
        if not 1 <= self.target_region <= self.n_regions:
            raise ValueError(f"target_region {self.target_region} outside 1..{self.n_regions}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not -1 < self.ar_coef < 1:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if any(n - 2 * self.margin < 1 for n in self.dims[:3]):
            raise ValueError(f"margin {self.margin} leaves no brain inside {self.dims[:3]}")

    @property
    def brain_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(self.margin, n - self.margin) for n in self.dims[:3])

    @property
    def affine(self) -> np.ndarray:
        return np.diag([self.spacing_mm] * 3 + [1.0])


def _cuts(extent: int, parts: int) -> list[int]:
    return [extent * i // parts for i in range(parts + 1)]


def generate_atlas(cfg: PhantomConfig) -> LabelVolume:
    """Tile the central brain block into a ``g x g x g`` grid of cells.

    Cells are numbered x-fastest; cell ``c`` gets label ``min(c + 1,
    n_regions)`` so surplus cells fold into the last region.
    """
    g = 1
    while g**3 < cfg.n_regions:
        g += 1
    brain = cfg.brain_slices
    extents = [s.stop - s.start for s in brain]
    if any(g > e for e in extents):
        raise ValueError(f"{cfg.n_regions} regions need a {g}^3 grid, brain block is only {tuple(extents)}")
    cuts = [_cuts(e, g) for e in extents]
    labels = np.zeros(cfg.dims[:3], dtype=np.uint16)
    cell = 0
    for k in range(g):
        for j in range(g):
            for i in range(g):
                sx = slice(brain[0].start + cuts[0][i], brain[0].start + cuts[0][i + 1])
                sy = slice(brain[1].start + cuts[1][j], brain[1].start + cuts[1][j + 1])
                sz = slice(brain[2].start + cuts[2][k], brain[2].start + cuts[2][k + 1])
                labels[sx, sy, sz] = min(cell + 1, cfg.n_regions)
                cell += 1
    return LabelVolume(labels, spacing_mm=(cfg.spacing_mm,) * 3, affine=cfg.affine)


def phantom_grouping(cfg: PhantomConfig) -> GroupingTable:
    """Region ``k`` becomes the ``k``-th macro group, so region 6 is 'LimbicRegions'."""
    if cfg.n_regions > len(GROUP_NAMES):
        raise ValueError(f"at most {len(GROUP_NAMES)} regions can be named")
    groups = tuple(RegionGroup(GROUP_NAMES[k], [k + 1]) for k in range(cfg.n_regions))
    return GroupingTable(groups, source="synthetic block atlas")


def target_group_name(cfg: PhantomConfig) -> str:
    return GROUP_NAMES[cfg.target_region - 1]


def generate_subject(cfg: PhantomConfig, label: int, subject_seed: int, atlas: LabelVolume | None = None) -> Volume4D:
    if label not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {label}")
    atlas = generate_atlas(cfg) if atlas is None else atlas
    nx, ny, nz, nt = cfg.dims
    rng = keyed_generator(cfg.seed, "subject", subject_seed)
    t = np.arange(nt) * cfg.tr_s
    phase = rng.uniform(0.0, 2 * np.pi)
    amp = cfg.base_amplitude * rng.uniform(0.8, 1.2)
    shared = amp * np.sin(2 * np.pi * cfg.base_freq_hz * t + phase)

    brain = atlas.labels != 0
    n_brain = int(brain.sum())
    # stationary AR(1): marginal std equals noise_std
    innovations = rng.standard_normal((n_brain, nt)) * cfg.noise_std * np.sqrt(1 - cfg.ar_coef**2)
    noise = np.empty_like(innovations)
    noise[:, 0] = rng.standard_normal(n_brain) * cfg.noise_std
    for k in range(1, nt):
        noise[:, k] = cfg.ar_coef * noise[:, k - 1] + innovations[:, k]

    signal = cfg.baseline + shared[None, :] + noise
    if label == 1:
        in_target = atlas.labels[brain] == cfg.target_region
        signal[in_target] += cfg.amplitude * np.sin(2 * np.pi * 2 * cfg.base_freq_hz * t)
    data = np.zeros(cfg.dims, dtype=np.float64)
    data[brain] = signal
    return Volume4D(data.astype(np.float32), spacing_mm=(cfg.spacing_mm,) * 3, tr_s=cfg.tr_s, affine=cfg.affine)


def subject_ids(cfg: PhantomConfig) -> list[str]:
    return [f"sub-{i:04d}" for i in range(2 * cfg.n_subjects_per_class)]


def subject_label(index: int) -> int:
    return index % 2


def generate_dataset(cfg: PhantomConfig):
    """``(ids, volumes, labels, atlas)`` for ``2 * n_subjects_per_class`` subjects, classes alternating."""
    atlas = generate_atlas(cfg)
    ids = subject_ids(cfg)
    labels = [subject_label(i) for i in range(len(ids))]
    volumes = [generate_subject(cfg, labels[i], i, atlas) for i in range(len(ids))]
    return ids, volumes, labels, atlas


def write_dataset(cfg: PhantomConfig, out_dir, fmt: str = "v4d") -> Path:
    """Write volumes, ``atlas.nii``, ``grouping.txt`` and ``labels.csv`` to ``out_dir``."""
    if fmt not in ("v4d", "nii"):
        raise ValueError(f"format must be 'v4d' or 'nii', got {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, volumes, labels, atlas = generate_dataset(cfg)
    for sid, vol in zip(ids, volumes):
        if fmt == "v4d":
            write_v4d(vol, out / f"{sid}.v4d")
        else:
            write_volume(vol, out / f"{sid}.nii")
    write_labels(atlas, out / "atlas.nii")
    (out / "grouping.txt").write_text(phantom_grouping(cfg).to_text())
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "label"])
        writer.writerows(zip(ids, labels))
    return out
