"""Per-subject standardisation: spatial/temporal resampling, crop/pad,
z-scoring over non-background voxels, and atlas alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, Mask3D, Volume4D, atlas_brain_mask, brain_mask


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: float = 2.0
    target_shape: tuple[int, int, int] = (96, 96, 96)
    target_tr_s: float = 0.8
    zscore_epsilon: float = 1e-8
    background_rule: str = "intensity"  # or "atlas"

    def __post_init__(self):
        if not self.target_spacing_mm > 0 or not self.target_tr_s > 0:
            raise ValueError("target spacing and TR must be positive")
        if len(self.target_shape) != 3 or any(int(n) < 1 for n in self.target_shape):
            raise ValueError(f"target_shape must be three positive ints, got {self.target_shape}")
        if not self.zscore_epsilon > 0:
            raise ValueError("zscore_epsilon must be positive")
        if self.background_rule not in ("intensity", "atlas"):
            raise ValueError(f"unknown background_rule {self.background_rule!r}")
        object.__setattr__(self, "target_shape", tuple(int(n) for n in self.target_shape))


def _linear_weights(positions: np.ndarray, n: int):
    """Bracketing indices and weights for 1D linear interpolation.

    Neighbours outside ``[0, n)`` get weight 0 so that off-grid samples read
    as zero rather than clamping.
    """
    lo = np.floor(positions).astype(np.int64)
    frac = positions - lo
    hi = lo + 1
    w_lo = np.where((lo >= 0) & (lo < n), 1.0 - frac, 0.0)
    w_hi = np.where((hi >= 0) & (hi < n), frac, 0.0)
    return np.clip(lo, 0, n - 1), np.clip(hi, 0, n - 1), w_lo, w_hi


def _interp_axis(data: np.ndarray, positions: np.ndarray, axis: int) -> np.ndarray:
    lo, hi, w_lo, w_hi = _linear_weights(positions, data.shape[axis])
    shape = [1] * data.ndim
    shape[axis] = -1
    return (
        np.take(data, lo, axis=axis) * w_lo.reshape(shape)
        + np.take(data, hi, axis=axis) * w_hi.reshape(shape)
    )


def resample_spatial(vol: Volume4D, target_spacing_mm) -> Volume4D:
    """Trilinear resample onto a grid with the requested voxel size.

    Voxel 0 keeps its world position; output voxel ``i`` along an axis sits
    at input index ``i * spacing_out / spacing_in``.
    """
    if np.isscalar(target_spacing_mm):
        target = (float(target_spacing_mm),) * 3
    else:
        target = tuple(float(s) for s in target_spacing_mm)
    if len(target) != 3 or any(not s > 0 for s in target):
        raise PreprocessError(f"target spacing must be positive, got {target_spacing_mm}")
    if target == vol.spacing_mm:
        return vol
    data = vol.data.astype(np.float64)
    for axis in range(3):
        ratio = target[axis] / vol.spacing_mm[axis]
        n_in = data.shape[axis]
        n_out = math.ceil(n_in * vol.spacing_mm[axis] / target[axis] - 1e-9)
        data = _interp_axis(data, np.arange(n_out) * ratio, axis)
    scale = np.diag([t / s for t, s in zip(target, vol.spacing_mm)] + [1.0])
    return vol.replace(data.astype(np.float32), spacing_mm=target, affine=vol.affine @ scale)


def _shift_affine(affine: np.ndarray, offset) -> np.ndarray:
    """Affine of a grid whose voxel 0 is voxel ``offset`` of the old grid."""
    shift = np.eye(4)
    shift[:3, 3] = offset
    return affine @ shift


def crop_pad_offsets(shape, target_shape) -> list[int]:
    """Per-axis index of the new voxel 0 in the old grid (negative when padding)."""
    offsets = []
    for n, m in zip(shape, target_shape):
        if m < 1:
            raise PreprocessError(f"target shape must be positive, got {tuple(target_shape)}")
        if n >= m:
            offsets.append((n - m) // 2)
        else:
            offsets.append(-((m - n) // 2))
    return offsets


def _crop_or_pad_array(data: np.ndarray, target_shape, offsets) -> np.ndarray:
    out = np.zeros(tuple(target_shape) + data.shape[3:], dtype=data.dtype, order="F")
    src, dst = [], []
    for n, m, off in zip(data.shape[:3], target_shape, offsets):
        if n >= m:
            src.append(slice(off, off + m))
            dst.append(slice(0, m))
        else:
            src.append(slice(0, n))
            dst.append(slice(-off, -off + n))
    out[tuple(dst)] = data[tuple(src)]
    return out


def crop_or_pad(vol: Volume4D, target_shape) -> Volume4D:
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3:
        raise PreprocessError(f"target shape must have three entries, got {target_shape}")
    offsets = crop_pad_offsets(vol.dims.spatial, target_shape)
    if target_shape == vol.dims.spatial:
        return vol
    data = _crop_or_pad_array(vol.data, target_shape, offsets)
    return vol.replace(data, affine=_shift_affine(vol.affine, offsets))


def crop_or_pad_labels(labels: LabelVolume, target_shape) -> LabelVolume:
    target_shape = tuple(int(n) for n in target_shape)
    offsets = crop_pad_offsets(labels.dims.spatial, target_shape)
    data = _crop_or_pad_array(labels.labels, target_shape, offsets)
    return LabelVolume(data, spacing_mm=labels.spacing_mm, affine=_shift_affine(labels.affine, offsets))


def resample_temporal(vol: Volume4D, target_tr_s: float) -> Volume4D:
    nt = vol.dims.nt
    if nt < 2:
        raise PreprocessError("temporal resampling needs at least two frames")
    if not target_tr_s > 0:
        raise PreprocessError(f"target TR must be positive, got {target_tr_s}")
    if target_tr_s == vol.tr_s:
        return vol
    duration = (nt - 1) * vol.tr_s
    n_out = math.floor(duration / target_tr_s + 1e-9) + 1
    positions = np.arange(n_out) * target_tr_s / vol.tr_s
    # the last sample may land a hair past nt-1 through rounding
    positions = np.minimum(positions, nt - 1)
    data = _interp_axis(vol.data.astype(np.float64), positions, axis=3)
    return vol.replace(data.astype(np.float32), tr_s=target_tr_s)


def zscore_stats(vol: Volume4D, brain: Mask3D | None = None) -> tuple[float, float, int]:
    """Pooled mean, population std and sample count over brain voxels x frames."""
    brain = brain_mask(vol) if brain is None else brain
    if brain.popcount == 0:
        raise PreprocessError("volume has no non-background voxels")
    values = vol.data[brain.bits].astype(np.float64).ravel()
    mean = values.sum() / values.size
    std = math.sqrt(((values - mean) ** 2).sum() / values.size)
    return float(mean), std, values.size


def zscore_nonbackground(vol: Volume4D, brain: Mask3D | None = None, epsilon: float = 1e-8) -> Volume4D:
    """``(v - mean) / (std + epsilon)`` inside the brain, exactly 0 outside."""
    brain = brain_mask(vol) if brain is None else brain
    mean, std, _ = zscore_stats(vol, brain)
    out = np.zeros(vol.data.shape, dtype=np.float32, order="F")
    inside = (vol.data[brain.bits].astype(np.float64) - mean) / (std + epsilon)
    out[brain.bits] = inside.astype(np.float32)
    return vol.replace(out)


def align_atlas(atlas: LabelVolume, reference) -> LabelVolume:
    """Nearest-neighbour resample of ``atlas`` onto the grid of ``reference``.

    ``reference`` is any object with ``dims``, ``affine`` and ``spacing_mm``
    (a :class:`Volume4D` or a :class:`LabelVolume`).
    """
    try:
        inverse = np.linalg.inv(atlas.affine)
    except np.linalg.LinAlgError:
        raise PreprocessError("atlas affine is singular") from None
    if not np.all(np.isfinite(inverse)) or abs(np.linalg.det(atlas.affine[:3, :3])) < 1e-12:
        raise PreprocessError("atlas affine is singular")
    nx, ny, nz = reference.dims.spatial
    index_map = inverse @ np.asarray(reference.affine)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    grid = np.stack([ii, jj, kk, np.ones_like(ii)]).reshape(4, -1).astype(np.float64)
    src = index_map @ grid
    nearest = np.floor(src[:3] + 0.5).astype(np.int64)
    shape = np.array(atlas.dims.spatial)[:, None]
    inside = np.all((nearest >= 0) & (nearest < shape), axis=0)
    out = np.zeros(nx * ny * nz, dtype=np.uint16)
    n = nearest[:, inside]
    out[inside] = atlas.labels[n[0], n[1], n[2]]
    return LabelVolume(out.reshape(nx, ny, nz), spacing_mm=reference.spacing_mm, affine=reference.affine)


def reference_grid(source, spacing_mm: float, shape) -> LabelVolume:
    """An empty label grid at ``spacing_mm`` with ``shape``, centred like the
    preprocessed version of ``source`` would be."""
    spacing = (float(spacing_mm),) * 3
    n_res = [math.ceil(n * s / spacing_mm - 1e-9) for n, s in zip(source.dims.spatial, source.spacing_mm)]
    scale = np.diag([spacing_mm / s for s in source.spacing_mm] + [1.0])
    affine = _shift_affine(np.asarray(source.affine) @ scale, crop_pad_offsets(n_res, shape))
    return LabelVolume(np.zeros(tuple(shape), dtype=np.uint16), spacing_mm=spacing, affine=affine)


def preprocess_volume(vol: Volume4D, cfg: PreprocessConfig, atlas: LabelVolume | None = None):
    """Run the full per-subject chain; returns ``(volume, aligned_atlas, brain)``.

    The brain mask used for z-scoring is taken from intensities after the
    spatial steps, or from the aligned atlas when ``background_rule='atlas'``.
    """
    out = resample_spatial(vol, cfg.target_spacing_mm)
    out = crop_or_pad(out, cfg.target_shape)
    if out.dims.nt >= 2:
        out = resample_temporal(out, cfg.target_tr_s)
    aligned = align_atlas(atlas, out) if atlas is not None else None
    if cfg.background_rule == "atlas":
        if aligned is None:
            raise PreprocessError("background_rule='atlas' needs an atlas")
        brain = atlas_brain_mask(aligned)
    else:
        brain = brain_mask(out)
    out = zscore_nonbackground(out, brain, cfg.zscore_epsilon)
    return out, aligned, brain
