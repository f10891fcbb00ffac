"""In-memory model for 4D scalar volumes, 3D label volumes and boolean masks.

Arrays are indexed ``[x, y, z, t]`` and flattened x-fastest (Fortran order),
which is the NIfTI-1 on-disk voxel order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BoundsError(IndexError):
    """A voxel coordinate or frame index lies outside the grid."""


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    nz: int
    nt: int = 1

    def __post_init__(self):
        for name in ("nx", "ny", "nz", "nt"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.nx, self.ny, self.nz, self.nt)

    @property
    def n_spatial(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def size(self) -> int:
        return self.n_spatial * self.nt

    def with_frames(self, nt: int) -> "GridDims":
        return GridDims(self.nx, self.ny, self.nz, nt)

    @classmethod
    def of(cls, shape) -> "GridDims":
        shape = tuple(int(s) for s in shape)
        if len(shape) == 3:
            shape = shape + (1,)
        if len(shape) != 4:
            raise ValueError(f"expected a 3D or 4D shape, got {shape}")
        return cls(*shape)


def linear_index(x: int, y: int, z: int, t: int, dims: GridDims) -> int:
    """Flat offset of voxel ``(x, y, z, t)``: ``x + nx*(y + ny*(z + nz*t))``."""
    for name, v, n in (("x", x, dims.nx), ("y", y, dims.ny), ("z", z, dims.nz), ("t", t, dims.nt)):
        if not 0 <= v < n:
            raise BoundsError(f"{name}={v} outside [0, {n})")
    return x + dims.nx * (y + dims.ny * (z + dims.nz * t))


def coords_from_index(index: int, dims: GridDims) -> tuple[int, int, int, int]:
    if not 0 <= index < dims.size:
        raise BoundsError(f"index {index} outside [0, {dims.size})")
    x = index % dims.nx
    index //= dims.nx
    y = index % dims.ny
    index //= dims.ny
    z = index % dims.nz
    t = index // dims.nz
    return x, y, z, t


def _check_affine(affine) -> np.ndarray:
    affine = np.array(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    return affine


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume4D:
    """Dense float32 field on an ``(nx, ny, nz, nt)`` grid.

    ``data`` is stored read-only; operations return new volumes.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tr_s: float = 1.0
    affine: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got ndim={data.ndim}")
        GridDims.of(data.shape)
        data = np.array(data, dtype=np.float32, order="F", copy=True)
        spacing = _check_spacing(self.spacing_mm)
        if not float(self.tr_s) > 0:
            raise ValueError(f"tr_s must be positive, got {self.tr_s}")
        affine = np.diag(spacing + (1.0,)) if self.affine is None else self.affine
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "tr_s", float(self.tr_s))
        object.__setattr__(self, "affine", _frozen(_check_affine(affine)))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.data.shape)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def replace(self, data=None, **meta) -> "Volume4D":
        return Volume4D(
            self.data if data is None else data,
            spacing_mm=meta.get("spacing_mm", self.spacing_mm),
            tr_s=meta.get("tr_s", self.tr_s),
            affine=meta.get("affine", self.affine),
        )

    def __eq__(self, other):
        if not isinstance(other, Volume4D):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and self.spacing_mm == other.spacing_mm
            and self.tr_s == other.tr_s
            and np.array_equal(self.affine, other.affine)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """3D uint16 parcellation; label 0 is background."""

    labels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 4 and labels.shape[3] == 1:
            labels = labels[..., 0]
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got ndim={labels.ndim}")
        if labels.size and (np.any(labels < 0) or np.any(labels > np.iinfo(np.uint16).max)):
            raise ValueError("labels must fit in an unsigned 16-bit integer")
        labels = np.array(labels, dtype=np.uint16, order="F", copy=True)
        spacing = _check_spacing(self.spacing_mm)
        affine = np.diag(spacing + (1.0,)) if self.affine is None else self.affine
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "affine", _frozen(_check_affine(affine)))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.labels.shape)

    def present_labels(self) -> set[int]:
        return {int(v) for v in np.unique(self.labels) if v != 0}

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.labels.shape == other.labels.shape
            and np.array_equal(self.labels, other.labels)
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.affine, other.affine)
        )


@dataclass(eq=False)
class _BitMask:
    bits: np.ndarray
    _popcount: int = field(init=False, repr=False)

    ndim = 0

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, order="F", copy=True)
        if bits.ndim != self.ndim:
            raise ValueError(f"{type(self).__name__} needs {self.ndim}D bits, got {bits.ndim}D")
        GridDims.of(bits.shape)
        self.bits = bits
        self._popcount = int(np.count_nonzero(bits))

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape, dtype=bool))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.bits.shape)

    @property
    def popcount(self) -> int:
        return self._popcount

    def recount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def get(self, *coords) -> bool:
        return bool(self.bits[self._checked(coords)])

    def set(self, *coords) -> None:
        c = self._checked(coords)
        if not self.bits[c]:
            self.bits[c] = True
            self._popcount += 1

    def clear(self, *coords) -> None:
        c = self._checked(coords)
        if self.bits[c]:
            self.bits[c] = False
            self._popcount -= 1

    def _checked(self, coords):
        if len(coords) != self.ndim:
            raise BoundsError(f"expected {self.ndim} coordinates, got {len(coords)}")
        for v, n in zip(coords, self.bits.shape):
            if not 0 <= v < n:
                raise BoundsError(f"coordinate {coords} outside grid {self.bits.shape}")
        return tuple(coords)

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self.bits, other.bits)


class Mask3D(_BitMask):
    """Boolean occupancy over spatial voxels."""

    ndim = 3

    def union(self, other: "Mask3D") -> "Mask3D":
        return Mask3D(self.bits | other.bits)

    def intersect(self, other: "Mask3D") -> "Mask3D":
        return Mask3D(self.bits & other.bits)

    def extrude(self, nt: int) -> "Mask4D":
        """Repeat this spatial mask at every one of ``nt`` frames (a tube)."""
        return Mask4D(np.repeat(self.bits[..., np.newaxis], nt, axis=3))


class Mask4D(_BitMask):
    """Boolean occupancy over spatiotemporal voxels."""

    ndim = 4

    def spatial_footprint(self) -> Mask3D:
        return Mask3D(self.bits.any(axis=3))

    def is_tube(self) -> bool:
        return bool(np.all(self.bits == self.bits[..., :1]))


def brain_mask(vol: Volume4D) -> Mask3D:
    """Voxels that are exactly nonzero in at least one frame."""
    return Mask3D(np.any(vol.data != 0.0, axis=3))


def atlas_brain_mask(labels: LabelVolume) -> Mask3D:
    return Mask3D(labels.labels != 0)


def extract_frame(vol: Volume4D, t: int) -> Volume4D:
    if not 0 <= t < vol.dims.nt:
        raise BoundsError(f"frame {t} outside [0, {vol.dims.nt})")
    return vol.replace(vol.data[..., t : t + 1])
