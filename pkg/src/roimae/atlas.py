"""Macro-region groupings of atlas labels and per-region mask-ratio statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Mask3D

GROUP_NAMES = (
    "FrontalLobe",
    "ParietalLobe",
    "TemporalLobe",
    "OccipitalLobe",
    "Cerebellum",
    "LimbicRegions",
    "SubcorticalStructures",
)

# short spellings accepted on the command line
ALIASES = {
    "frontal": "FrontalLobe",
    "parietal": "ParietalLobe",
    "temporal": "TemporalLobe",
    "occipital": "OccipitalLobe",
    "cerebellum": "Cerebellum",
    "limbic": "LimbicRegions",
    "subcortical": "SubcorticalStructures",
}

DISPLAY_NAMES = {
    "FrontalLobe": "Frontal lobe",
    "ParietalLobe": "Parietal lobe",
    "TemporalLobe": "Temporal lobe",
    "OccipitalLobe": "Occipital lobe",
    "Cerebellum": "Cerebellum",
    "LimbicRegions": "Limbic regions",
    "SubcorticalStructures": "Subcortical structures",
}

# AAL3v1 leaves these ids unassigned
AAL3_UNUSED = frozenset({35, 36, 81, 82})
AAL3_LABELS = frozenset(range(1, 171)) - AAL3_UNUSED


class GroupingError(ValueError):
    pass


def canonical_group_name(name: str) -> str:
    key = name.strip()
    if key in GROUP_NAMES:
        return key
    lowered = key.lower()
    if lowered in ALIASES:
        return ALIASES[lowered]
    for full in GROUP_NAMES:
        if full.lower() == lowered:
            return full
    raise GroupingError(f"unknown group name {name!r}; expected one of {', '.join(GROUP_NAMES)}")


@dataclass(frozen=True)
class RegionGroup:
    name: str
    label_ids: frozenset

    def __post_init__(self):
        object.__setattr__(self, "name", canonical_group_name(self.name))
        ids = frozenset(int(i) for i in self.label_ids)
        if not ids:
            raise GroupingError(f"group {self.name} has no labels")
        if any(i <= 0 for i in ids):
            raise GroupingError(f"group {self.name} contains a non-positive label id")
        object.__setattr__(self, "label_ids", ids)

    def __or__(self, other: "RegionGroup") -> "RegionGroup":
        return RegionGroup(self.name, self.label_ids | other.label_ids)


@dataclass(frozen=True)
class GroupingTable:
    groups: tuple
    source: str = ""

    def __post_init__(self):
        groups = tuple(self.groups)
        seen: dict[int, str] = {}
        names = set()
        for g in groups:
            if g.name in names:
                raise GroupingError(f"group {g.name} defined twice")
            names.add(g.name)
            for i in g.label_ids:
                if i in seen:
                    raise GroupingError(f"label {i} assigned to both {seen[i]} and {g.name}")
                seen[i] = g.name
        object.__setattr__(self, "groups", groups)

    def __getitem__(self, name: str) -> RegionGroup:
        canonical = canonical_group_name(name)
        for g in self.groups:
            if g.name == canonical:
                return g
        raise GroupingError(f"group {canonical} is not in this grouping table")

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    def to_text(self) -> str:
        lines = [f"# {self.source}"] if self.source else []
        for g in self.groups:
            lines.append(f"{g.name}: " + ", ".join(str(i) for i in sorted(g.label_ids)))
        return "\n".join(lines) + "\n"


def _parse_ids(text: str, lineno: int) -> list[int]:
    ids = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            if "-" in item:
                a, b = (int(p) for p in item.split("-", 1))
                if b < a:
                    raise ValueError
                ids.extend(range(a, b + 1))
            else:
                ids.append(int(item))
        except ValueError:
            raise GroupingError(f"line {lineno}: cannot parse label id {item!r}") from None
    return ids


def parse_grouping(text: str, source: str = "") -> GroupingTable:
    groups = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise GroupingError(f"line {lineno}: expected 'Name: id, id, ...'")
        name, ids = line.split(":", 1)
        ids = _parse_ids(ids, lineno)
        if not ids:
            raise GroupingError(f"line {lineno}: group {name.strip()} is empty")
        if len(set(ids)) != len(ids):
            raise GroupingError(f"line {lineno}: group {name.strip()} lists a label twice")
        groups.append(RegionGroup(name, ids))
    if not groups:
        raise GroupingError("grouping file defines no groups")
    return GroupingTable(tuple(groups), source=source)


def load_grouping(path) -> GroupingTable:
    path = Path(path)
    return parse_grouping(path.read_text(), source=str(path))


def default_grouping() -> GroupingTable:
    """The bundled AAL3 grouping (a documented reconstruction)."""
    text = resources.files("roimae").joinpath("data/aal3_grouping.txt").read_text()
    return parse_grouping(text, source="AAL3 default grouping (reconstruction)")


def region_voxels(labels: LabelVolume, group: RegionGroup) -> Mask3D:
    ids = np.fromiter(sorted(group.label_ids), dtype=np.int64)
    return Mask3D(np.isin(labels.labels, ids))


def mask_ratio(labels: LabelVolume, group: RegionGroup, brain: Mask3D) -> tuple[int, float]:
    """``(|region & brain|, 100 * |region & brain| / |brain|)``."""
    if brain.popcount == 0:
        raise GroupingError("brain mask is empty")
    if brain.dims.spatial != labels.dims.spatial:
        raise GroupingError(f"brain mask grid {brain.dims.spatial} != atlas grid {labels.dims.spatial}")
    count = int(np.count_nonzero(region_voxels(labels, group).bits & brain.bits))
    return count, 100.0 * count / brain.popcount


def mask_ratio_table(labels: LabelVolume, grouping: GroupingTable, brain: Mask3D) -> list[dict]:
    rows = []
    for g in grouping:
        count, percent = mask_ratio(labels, g, brain)
        rows.append({"mask": DISPLAY_NAMES[g.name], "voxels": count, "percent": percent})
    return rows


def write_mask_ratio_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Mask", "Number of voxels masked", "Percentage of brain masked"])
        for row in rows:
            writer.writerow([row["mask"], row["voxels"], f"{row['percent']:.2f}%"])
