"""Dataset manifest rows and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

from . import FAMILIES

SPLITS = ("train", "valid", "test")
FIELDS = ("example_id", "path", "label", "split", "effect")


@dataclass(frozen=True)
class Row:
    example_id: str
    path: str
    label: int
    split: str
    effect: str = "none"

    def __post_init__(self):
        if not 0 <= self.label < len(FAMILIES):
            raise ValueError(f"{self.example_id}: label {self.label} outside 0..{len(FAMILIES) - 1}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.example_id}: unknown split {self.split!r}")


class DatasetManifest(list):
    """A list of :class:`Row` with CSV persistence and a few filters."""

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(r for r in self if r.split == name)

    def with_paths(self, mapping) -> "DatasetManifest":
        return DatasetManifest(replace(r, path=str(mapping[r.example_id])) for r in self)

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for r in self:
                w.writerow([r.example_id, r.path, r.label, r.split, r.effect])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(FIELDS[:4]) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
            return cls(
                Row(
                    example_id=rec["example_id"],
                    path=rec["path"],
                    label=int(rec["label"]),
                    split=rec["split"],
                    effect=rec.get("effect") or "none",
                )
                for rec in reader
            )
