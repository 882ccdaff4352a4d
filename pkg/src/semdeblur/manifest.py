"""Dataset manifest: JSON Lines records binding image pairs, captions,
tree labels, and split assignments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ManifestError

SPLITS = ("train", "val", "test")


@dataclass
class ManifestRecord:
    id: str
    sharp_path: str
    blurry_path: str
    severity: float
    captions: list[str]
    tree_labels: list[list[int]] = field(default_factory=list)
    split: str = "train"

    def validate(self, ent_size: int | None = None, rel_size: int | None = None) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: unknown split {self.split!r}")
        if not self.captions:
            raise ManifestError(f"record {self.id!r}: no captions")
        if self.tree_labels:
            if len(self.tree_labels) != len(self.captions):
                raise ManifestError(
                    f"record {self.id!r}: {len(self.tree_labels)} label rows "
                    f"for {len(self.captions)} captions")
            for row in self.tree_labels:
                if len(row) != 7:
                    raise ManifestError(f"record {self.id!r}: label row length {len(row)}")
                if ent_size is not None:
                    for node_idx, label in enumerate(row):
                        size = ent_size if node_idx % 2 == 0 else rel_size
                        if not 0 <= label < size:
                            raise ManifestError(
                                f"record {self.id!r}: node {node_idx + 1} label "
                                f"{label} outside vocab of size {size}")


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, check_paths: bool = True,
             ent_size: int | None = None, rel_size: int | None = None) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        records = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(ManifestRecord(**json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
        manifest = cls(records=records, root=path.parent)
        for record in records:
            record.validate(ent_size, rel_size)
            if check_paths:
                for p in (record.sharp_path, record.blurry_path):
                    if not manifest.resolve(p).exists():
                        raise ManifestError(f"record {record.id!r}: missing file {p}")
        return manifest
