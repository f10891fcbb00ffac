"""Randomised (strategy, seed, dims) cases and the property checks run on them."""

import numpy as np

from roimae.atlas import GROUP_NAMES, GroupingTable, RegionGroup, region_voxels
from roimae.masking import MaskStrategy, generate_mask, round_half_up, select_window_blocks
from roimae.volume import GridDims, LabelVolume, Mask3D


def random_case(rng):
    dims = GridDims(*(int(v) for v in rng.integers(2, 9, 3)), int(rng.integers(1, 6)))
    kind = ["random-random", "random-tube", "window-random", "roi"][int(rng.integers(4))]
    n_regions = 4
    labels = LabelVolume(rng.integers(0, n_regions + 1, dims.spatial).astype(np.uint16))
    grouping = GroupingTable(tuple(RegionGroup(GROUP_NAMES[k], [k + 1]) for k in range(n_regions)))
    brain = Mask3D(rng.random(dims.spatial) < 0.8)
    seed = int(rng.integers(0, 2**63))
    if kind == "roi":
        # keep only groups that intersect the brain
        usable = [g for g in grouping if np.any(region_voxels(labels, g).bits & brain.bits)]
        if not usable:
            kind = "random-tube"
        else:
            pick = rng.choice(len(usable), size=int(rng.integers(1, len(usable) + 1)), replace=False)
            groups = tuple(usable[i].name for i in sorted(pick))
            fraction = float(rng.choice([1.0, 0.5, float(rng.uniform(0.05, 1.0))]))
            return MaskStrategy("roi", groups=groups, fraction=fraction, seed=seed), dims, labels, brain, grouping
    ratio = float(rng.uniform(0.01, 0.9))
    block = tuple(int(b) for b in rng.integers(1, 5, 3))
    return MaskStrategy(kind, ratio=ratio, block_shape=block, seed=seed), dims, labels, brain, grouping


def violations(strategy, dims, labels, brain, grouping) -> list[str]:
    """Exact-count, tube, ROI-containment and determinism checks for one case."""
    out = []
    mask = generate_mask(strategy, dims, labels, brain, grouping)
    again = generate_mask(strategy, dims, labels, brain, grouping)
    if mask != again:
        out.append("determinism")
    if mask.popcount != mask.recount():
        out.append("popcount cache")
    kind = strategy.kind
    if kind == "random-random":
        if mask.popcount != round_half_up(strategy.ratio * dims.size):
            out.append("count")
    elif kind == "random-tube":
        if mask.spatial_footprint().popcount != round_half_up(strategy.ratio * dims.n_spatial):
            out.append("count")
    elif kind == "window-random":
        chosen, frames, target = select_window_blocks(strategy, dims)
        covered = [((b[0].stop - b[0].start) * (b[1].stop - b[1].start) * (b[2].stop - b[2].start)) for b in chosen]
        # stops the first time the spatial budget is reached
        if sum(covered) < target or (chosen and sum(covered[:-1]) >= target):
            out.append("window budget")
        expected = sum(c * int(f.sum()) for c, f in zip(covered, frames))
        if mask.popcount != expected:
            out.append("count")
    else:
        footprint = mask.spatial_footprint()
        allowed = np.zeros(dims.spatial, dtype=bool)
        expected = 0
        for name in strategy.groups:
            region = region_voxels(labels, grouping[name]).bits & brain.bits
            allowed |= region
            expected += round_half_up(strategy.fraction * int(region.sum()))
            if strategy.fraction == 1.0 and not np.all(footprint.bits[region]):
                out.append("full region")
        if np.any(footprint.bits & ~allowed):
            out.append("roi containment")
        if footprint.popcount != expected:
            out.append("count")
    if strategy.is_tube and not mask.is_tube():
        out.append("tube")
    return out
