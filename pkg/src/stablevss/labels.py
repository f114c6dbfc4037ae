"""Alignment of dataset label ids to the 15 shared driving classes."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

IGNORE = 255
NUM_OVERLAP = 15

OVERLAP_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "sky", "person", "rider", "car", "truck_bus",
    "motorcycle",
)

# overlap id -> source ids, per dataset
_TABLE = {
    "cityscapes": [[0], [1], [2], [3], [4], [5], [6], [7], [8], [10], [11], [12], [13], [14, 15], [17]],
    "apolloscape": [[9], [10], [20], [17], [13], [15], [14], [16], [21], [0], [4], [5], [1], [6, 7], [2]],
    "camvid": [[17], [19], [4], [30], [9], [8], [24], [20], [26, 29], [21], [16], [2], [5], [27], [13]],
}

_NOTES = {
    "cityscapes": ["truck (14) and bus (15) merge into truck_bus"],
    "apolloscape": ["truck (6) and bus (7) merge into truck_bus"],
    "camvid": ["Tree (26) and VegetationMisc (29) merge into vegetation"],
}


@dataclass
class MappingTable:
    dataset: str
    mapping: dict  # source id -> overlap id
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for src, dst in self.mapping.items():
            if not (0 <= dst < NUM_OVERLAP or dst == IGNORE):
                raise DataError(f"{self.dataset}: source id {src} maps to {dst}, outside the overlap space")

    def lookup_table(self, size=256):
        lut = np.full(max(size, max(self.mapping, default=0) + 1), IGNORE, dtype=np.int64)
        for src, dst in self.mapping.items():
            lut[src] = dst
        return lut


def builtin_mapping(dataset):
    key = dataset.lower()
    if key not in _TABLE:
        raise KeyError(f"no built-in mapping for {dataset!r}; known: {sorted(_TABLE)}")
    mapping = {src: overlap for overlap, srcs in enumerate(_TABLE[key]) for src in srcs}
    return MappingTable(key, mapping, list(_NOTES[key]))


def identity_mapping():
    return MappingTable("overlap", {i: i for i in range(NUM_OVERLAP)})


def load_mappings(path):
    """Read ``{dataset: [{"source_id": s, "overlap_id": o}, ...]}``."""
    raw = json.loads(Path(path).read_text())
    return {
        name: MappingTable(name, {int(e["source_id"]): int(e["overlap_id"]) for e in entries})
        for name, entries in raw.items()
    }


def resolve_mapping(spec):
    """A built-in dataset name, or ``path.json:dataset``."""
    if spec is None:
        return None
    if ":" in spec and spec.split(":", 1)[0].endswith(".json"):
        path, name = spec.split(":", 1)
        return load_mappings(path)[name]
    return builtin_mapping(spec)


def remap(labels, table, strict=False, ignore=IGNORE):
    """Map source ids to overlap ids; ignore stays ignore, unknown ids become ignore.

    With ``strict`` an id missing from the table raises instead.
    """
    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise DataError("negative label id")
    lut = table.lookup_table(int(labels.max(initial=0)) + 1)
    out = lut[labels]
    if strict:
        missing = sorted(set(np.unique(labels).tolist()) - set(table.mapping) - {ignore})
        if missing:
            raise DataError(f"{table.dataset}: ids {missing} are not in the mapping table")
    out[labels == ignore] = IGNORE
    return out.astype(labels.dtype if labels.dtype.kind in "iu" else np.int64)
