"""Dataset directories: manifest parsing, lazy tensor access, split checks."""
from __future__ import annotations

import json
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..errors import DataError
from ..modality import MODALITIES
from .tensorio import read_tensor

SPLITS = ("base-train", "base-test", "novel", "unlabeled")
BASE_SPLITS = ("base-train", "base-test")


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    clip_id: str
    label: str | None
    split: str
    files: dict = field(hash=False, compare=False)


class Dataset:
    """Lazily loaded dataset handle.

    Tensor reads are memoised and recorded in :attr:`access_log` as
    ``(split, example_id, modality)`` so tests can assert which data a
    training stage touched.
    """

    def __init__(self, root: Path, manifest: dict, examples: list[ExampleRecord]):
        self.root = root
        self.schema_version = manifest["schema_version"]
        self.base_classes: list[str] = list(manifest["base_classes"])
        self.novel_classes: list[str] = list(manifest["novel_classes"])
        self.examples = examples
        self.by_id = {e.id: e for e in examples}
        self.access_log: Counter = Counter()
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self._base_index = {c: i for i, c in enumerate(self.base_classes)}
        self._novel_index = {c: i for i, c in enumerate(self.novel_classes)}

    def __iter__(self) -> Iterator[ExampleRecord]:
        return iter(self.examples)

    def __len__(self) -> int:
        return len(self.examples)

    def split(self, name: str) -> list[ExampleRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [e for e in self.examples if e.split == name]

    def class_table(self, split: str) -> list[str]:
        return self.base_classes if split in BASE_SPLITS else self.novel_classes

    def class_index(self, record: ExampleRecord) -> int:
        table = self._base_index if record.split in BASE_SPLITS else self._novel_index
        if record.label is None or record.label not in table:
            raise DataError(f"{record.id}: label {record.label!r} not in its class table")
        return table[record.label]

    def tensor(self, example_id: str, modality: str) -> np.ndarray:
        rec = self.by_id[example_id]
        key = (example_id, modality)
        with self._lock:
            self.access_log[(rec.split, example_id, modality)] += 1
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        arr = read_tensor(self.root / rec.files[modality]).astype(np.float64)
        arr.setflags(write=False)
        with self._lock:
            self._cache[key] = arr
        return arr

    def token_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-modality tensor shape, read from the first example without logging access."""
        if not self.examples:
            raise DataError(f"{self.root}: dataset has no examples")
        rec = self.examples[0]
        return {m: read_tensor(self.root / rec.files[m]).shape for m in MODALITIES}

    def stack(self, records: Sequence[ExampleRecord], modality: str) -> np.ndarray:
        return np.stack([self.tensor(r.id, modality) for r in records])

    def labels(self, records: Sequence[ExampleRecord]) -> np.ndarray:
        return np.array([self.class_index(r) for r in records], dtype=np.int64)

    def accessed(self, split: str | None = None, modality: str | None = None) -> set[str]:
        return {eid for (s, eid, m) in self.access_log
                if (split is None or s == split) and (modality is None or m == modality)}


REQUIRED_KEYS = ("schema_version", "base_classes", "novel_classes", "examples")


def load_dataset(path: str | os.PathLike, check_files: bool = True) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from exc
    missing = [k for k in REQUIRED_KEYS if k not in manifest]
    if missing:
        raise DataError(f"{mpath}: missing keys {missing}")
    base, novel = set(manifest["base_classes"]), set(manifest["novel_classes"])
    seen: set[str] = set()
    examples = []
    for raw in manifest["examples"]:
        try:
            rec = ExampleRecord(raw["id"], raw["clip_id"], raw["label"], raw["split"], dict(raw["files"]))
        except KeyError as exc:
            raise DataError(f"{mpath}: example record missing {exc}") from exc
        if rec.id in seen:
            raise DataError(f"duplicate example id {rec.id!r}")
        seen.add(rec.id)
        if rec.split not in SPLITS:
            raise DataError(f"{rec.id}: unknown split {rec.split!r}")
        if rec.split == "unlabeled":
            if rec.label is not None:
                raise DataError(f"{rec.id}: unlabeled example carries label {rec.label!r}")
        else:
            table = base if rec.split in BASE_SPLITS else novel
            if rec.label not in table:
                raise DataError(f"{rec.id}: label {rec.label!r} not in the {rec.split} class table")
        absent = [m for m in MODALITIES if m not in rec.files]
        if absent:
            raise DataError(f"{rec.id}: no file for modalities {absent}")
        if check_files:
            for m in MODALITIES:
                f = root / rec.files[m]
                if not f.exists():
                    raise DataError(f"missing tensor file: {f}")
        examples.append(rec)
    return Dataset(root, manifest, examples)


@dataclass(frozen=True)
class Violation:
    kind: str  # class-overlap | clip-overlap | train-test-overlap
    detail: str


@dataclass
class SplitReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> Counter:
        return Counter(v.kind for v in self.violations)


def validate_splits(dataset: Dataset) -> SplitReport:
    """Check class disjointness, clip disjointness between base and novel,
    and example disjointness between base-train and base-test."""
    out: list[Violation] = []
    for c in sorted(set(dataset.base_classes) & set(dataset.novel_classes)):
        out.append(Violation("class-overlap", f"class {c!r} is both base and novel"))
    base_clips = {e.clip_id for e in dataset.examples if e.split in BASE_SPLITS}
    novel_clips = {e.clip_id for e in dataset.examples if e.split == "novel"}
    for c in sorted(base_clips & novel_clips):
        out.append(Violation("clip-overlap", f"clip {c!r} appears in base and novel splits"))
    train_ids = {e.id for e in dataset.examples if e.split == "base-train"}
    test_ids = {e.id for e in dataset.examples if e.split == "base-test"}
    for i in sorted(train_ids & test_ids):
        out.append(Violation("train-test-overlap", f"example {i!r} in base-train and base-test"))
    return SplitReport(out)
