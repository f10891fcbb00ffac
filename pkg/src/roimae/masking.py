"""Mask generation for the three baseline strategies and atlas-guided tube masking.

Strategy strings (CLI and config files)::

    random-random:0.10
    random-tube:0.10
    window-random:8x8x8:0.10
    roi:limbic,cerebellum:0.5      # fraction defaults to 1.0 when omitted
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .atlas import DISPLAY_NAMES, GroupingTable, canonical_group_name, region_voxels
from .rng import keyed_generator, sample_without_replacement
from .volume import GridDims, LabelVolume, Mask3D, Mask4D, Volume4D, atlas_brain_mask

KINDS = ("random-random", "random-tube", "window-random", "roi")


class MaskError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskStrategy:
    kind: str
    ratio: float = 0.10
    block_shape: tuple[int, int, int] = (8, 8, 8)
    groups: tuple[str, ...] = ()
    fraction: float = 1.0
    frame_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MaskError(f"unknown mask kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "roi":
            if not self.groups:
                raise MaskError("roi masking needs at least one group")
            object.__setattr__(self, "groups", tuple(canonical_group_name(g) for g in self.groups))
            if len(set(self.groups)) != len(self.groups):
                raise MaskError(f"duplicate group in {self.groups}")
            if not 0.0 < self.fraction <= 1.0:
                raise MaskError(f"fraction must lie in (0, 1], got {self.fraction}")
        else:
            if not 0.0 < self.ratio < 1.0:
                raise MaskError(f"ratio must lie in (0, 1), got {self.ratio}")
        if self.kind == "window-random":
            shape = tuple(int(b) for b in self.block_shape)
            if len(shape) != 3 or min(shape) < 1:
                raise MaskError(f"block shape must be three positive ints, got {self.block_shape}")
            object.__setattr__(self, "block_shape", shape)
            if not 0.0 <= self.frame_prob <= 1.0:
                raise MaskError(f"frame_prob must lie in [0, 1], got {self.frame_prob}")
        if not 0 <= int(self.seed) < 2**64:
            raise MaskError("seed must be an unsigned 64-bit integer")

    @property
    def is_tube(self) -> bool:
        return self.kind in ("random-tube", "roi")

    def with_seed(self, seed: int) -> "MaskStrategy":
        return MaskStrategy(self.kind, self.ratio, self.block_shape, self.groups, self.fraction, self.frame_prob, seed)

    def spec(self) -> str:
        """Canonical strategy string; ``parse_strategy(s.spec())`` reproduces ``s`` up to seed."""
        if self.kind == "roi":
            return f"roi:{','.join(self.groups)}:{self.fraction!r}"
        if self.kind == "window-random":
            shape = "x".join(str(b) for b in self.block_shape)
            extra = "" if self.frame_prob == 0.5 else f":{self.frame_prob!r}"
            return f"window-random:{shape}:{self.ratio!r}{extra}"
        return f"{self.kind}:{self.ratio!r}"

    def fingerprint(self) -> str:
        # group order does not change the mask
        if self.kind == "roi":
            return f"roi:{','.join(sorted(self.groups))}:{self.fraction!r}"
        return self.spec()

    def label(self) -> str:
        """Human-readable row name for reports."""
        if self.kind == "roi":
            suffix = "" if self.fraction == 1.0 else f" ({100 * self.fraction:g}%)"
            return " + ".join(DISPLAY_NAMES[g] + suffix for g in self.groups)
        spatial, temporal = {
            "random-random": ("Random", "Random"),
            "random-tube": ("Random", "Tube"),
            "window-random": ("Window", "Random"),
        }[self.kind]
        return f"{spatial}/{temporal} ({100 * self.ratio:g}%)"


def _number(text: str, spec: str, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise MaskError(f"cannot parse {text!r} in mask strategy {spec!r}") from None


def parse_strategy(text: str, seed: int = 0) -> MaskStrategy:
    parts = text.strip().split(":")
    kind = parts[0].lower()
    if kind in ("random-random", "random-tube") and len(parts) == 2:
        return MaskStrategy(kind, ratio=_number(parts[1], text), seed=seed)
    if kind == "window-random" and len(parts) in (3, 4):
        shape = tuple(_number(b, text, int) for b in parts[1].lower().split("x"))
        prob = _number(parts[3], text) if len(parts) == 4 else 0.5
        return MaskStrategy(kind, ratio=_number(parts[2], text), block_shape=shape, frame_prob=prob, seed=seed)
    if kind == "roi" and len(parts) in (2, 3):
        groups = tuple(g for g in parts[1].replace("+", ",").split(",") if g.strip())
        fraction = _number(parts[2], text) if len(parts) == 3 else 1.0
        return MaskStrategy("roi", groups=groups, fraction=fraction, seed=seed)
    if kind in KINDS:
        raise MaskError(f"wrong number of fields in mask strategy {text!r}")
    raise MaskError(f"unknown mask kind {kind!r} in {text!r}")


def _flat_to_bits(indices: np.ndarray, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    flat[indices] = True
    return flat.reshape(shape, order="F")


def _draw(rng, candidates: np.ndarray, k: int) -> np.ndarray:
    if k > candidates.size:
        raise MaskError(f"requested {k} voxels but only {candidates.size} are available")
    return sample_without_replacement(rng, candidates, k)


def window_blocks(dims: GridDims, block_shape) -> list[tuple[slice, slice, slice]]:
    """Disjoint blocks tiling the spatial grid from the origin, x-fastest."""
    ranges = []
    for n, b in zip(dims.spatial, block_shape):
        ranges.append([slice(s, min(s + b, n)) for s in range(0, n, b)])
    return [(sx, sy, sz) for sz in ranges[2] for sy in ranges[1] for sx in ranges[0]]


def _block_size(block) -> int:
    return (block[0].stop - block[0].start) * (block[1].stop - block[1].start) * (block[2].stop - block[2].start)


def select_window_blocks(strategy: MaskStrategy, dims: GridDims):
    """Blocks chosen for a window-random mask, plus the per-(block, frame) draws."""
    rng = keyed_generator(strategy.seed, strategy.fingerprint(), dims.shape)
    blocks = window_blocks(dims, strategy.block_shape)
    target = round_half_up(strategy.ratio * dims.n_spatial)
    order = _draw(rng, np.arange(len(blocks)), len(blocks))
    chosen, covered = [], 0
    for b in order.tolist():
        if covered >= target:
            break
        chosen.append(blocks[b])
        covered += _block_size(blocks[b])
    frames = rng.random((len(chosen), dims.nt)) < strategy.frame_prob
    return chosen, frames, target


def generate_mask(
    strategy: MaskStrategy,
    dims: GridDims,
    labels: LabelVolume | None = None,
    brain: Mask3D | None = None,
    grouping: GroupingTable | None = None,
) -> Mask4D:
    """Draw the mask described by ``strategy`` on a grid of ``dims``.

    Randomness is keyed on ``(strategy.seed, strategy.fingerprint(), dims)``
    so equal inputs always give bit-identical masks.
    """
    kind = strategy.kind
    shape = dims.shape
    if kind == "random-random":
        rng = keyed_generator(strategy.seed, strategy.fingerprint(), shape)
        k = round_half_up(strategy.ratio * dims.size)
        return Mask4D(_flat_to_bits(_draw(rng, np.arange(dims.size), k), shape))

    if kind == "random-tube":
        rng = keyed_generator(strategy.seed, strategy.fingerprint(), shape)
        k = round_half_up(strategy.ratio * dims.n_spatial)
        spatial = _flat_to_bits(_draw(rng, np.arange(dims.n_spatial), k), dims.spatial)
        return Mask3D(spatial).extrude(dims.nt)

    if kind == "window-random":
        chosen, frames, _ = select_window_blocks(strategy, dims)
        bits = np.zeros(shape, dtype=bool, order="F")
        for block, on in zip(chosen, frames):
            bits[block + (on,)] = True
        return Mask4D(bits)

    if labels is None:
        raise MaskError("roi masking needs an atlas label volume")
    if grouping is None:
        raise MaskError("roi masking needs a grouping table to resolve group names")
    if labels.dims.spatial != dims.spatial:
        raise MaskError(f"atlas grid {labels.dims.spatial} does not match volume grid {dims.spatial}")
    if brain is None:
        brain = atlas_brain_mask(labels)
    if brain.dims.spatial != dims.spatial:
        raise MaskError(f"brain mask grid {brain.dims.spatial} does not match volume grid {dims.spatial}")
    spatial = np.zeros(dims.spatial, dtype=bool, order="F")
    for name in strategy.groups:
        try:
            group = grouping[name]
        except ValueError as exc:
            raise MaskError(str(exc)) from None
        region = region_voxels(labels, group).bits & brain.bits
        candidates = np.flatnonzero(region.ravel(order="F"))
        if candidates.size == 0:
            raise MaskError(f"region {name} has no voxels inside the brain mask")
        k = round_half_up(strategy.fraction * candidates.size)
        if k == candidates.size:
            chosen = candidates
        else:
            rng = keyed_generator(strategy.seed, strategy.fingerprint(), shape, name)
            chosen = _draw(rng, candidates, k)
        spatial |= _flat_to_bits(chosen, dims.spatial)
    return Mask3D(spatial).extrude(dims.nt)


def expected_popcount(strategy: MaskStrategy, dims: GridDims, region_sizes: list[int] | None = None) -> int | None:
    """Closed-form mask size where one exists (window-random has none)."""
    if strategy.kind == "random-random":
        return round_half_up(strategy.ratio * dims.size)
    if strategy.kind == "random-tube":
        return round_half_up(strategy.ratio * dims.n_spatial) * dims.nt
    if strategy.kind == "roi":
        if region_sizes is None:
            raise ValueError("roi popcount needs the size of each region & brain")
        return sum(round_half_up(strategy.fraction * n) for n in region_sizes) * dims.nt
    return None


def apply_mask(vol: Volume4D, mask: Mask4D, fill: float = 0.0) -> Volume4D:
    if mask.bits.shape != vol.data.shape:
        raise MaskError(f"mask grid {mask.bits.shape} does not match volume grid {vol.data.shape}")
    data = np.where(mask.bits, np.float32(fill), vol.data)
    return vol.replace(data)
