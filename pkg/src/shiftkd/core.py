"""Shared data model, manifest persistence and seeded randomness."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

FORMAT_NAME = "shiftkd-manifest"
FORMAT_VERSION = 1


class ShiftKDError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ShiftKDError, ValueError):
    pass


class DataError(ShiftKDError):
    pass


class ManifestError(DataError):
    pass


class NumericError(ShiftKDError):
    pass


class Domain(str, enum.Enum):
    SOURCE = "SOURCE"
    TARGET = "TARGET"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"
    UNASSIGNED = "UNASSIGNED"


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    class_id: int
    class_name: str
    domain: Domain
    uri: str
    width_px: int
    height_px: int
    occurrence_id: Optional[str] = None
    checksum: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "domain": self.domain.value,
            "uri": self.uri,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "occurrence_id": self.occurrence_id,
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImageRecord":
        return cls(
            record_id=str(d["record_id"]),
            class_id=int(d["class_id"]),
            class_name=str(d["class_name"]),
            domain=Domain(d["domain"]),
            uri=str(d["uri"]),
            width_px=int(d["width_px"]),
            height_px=int(d["height_px"]),
            occurrence_id=None if d.get("occurrence_id") is None else str(d["occurrence_id"]),
            checksum=d.get("checksum"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered records plus class table and split map.

    ``class_table[i]`` is the species name of class ``i``; names are unique so
    the table is a bijection. Records missing from ``split`` are UNASSIGNED.
    """

    records: tuple[ImageRecord, ...] = ()
    class_table: tuple[str, ...] = ()
    split: Mapping[str, Split] = field(default_factory=dict)
    provenance: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_table", tuple(self.class_table))
        object.__setattr__(self, "split", dict(self.split))
        self.validate()

    def validate(self) -> None:
        if len(set(self.class_table)) != len(self.class_table):
            seen: set[str] = set()
            dup = next(n for n in self.class_table if n in seen or seen.add(n))
            raise ManifestError(f"class_table collision: {dup!r} appears more than once")
        ids: set[str] = set()
        for i, r in enumerate(self.records):
            if r.record_id in ids:
                raise ManifestError(f"record {i}: duplicate record_id {r.record_id!r}")
            ids.add(r.record_id)
            if not 0 <= r.class_id < len(self.class_table):
                raise ManifestError(f"record {i} ({r.record_id}): class_id {r.class_id} outside class table")
            if self.class_table[r.class_id] != r.class_name:
                raise ManifestError(
                    f"record {i} ({r.record_id}): class_name {r.class_name!r} does not match "
                    f"class_table[{r.class_id}]={self.class_table[r.class_id]!r}"
                )
            if r.width_px <= 0 or r.height_px <= 0:
                raise ManifestError(f"record {i} ({r.record_id}): non-positive image size")
        for rid in self.split:
            if rid not in ids:
                raise ManifestError(f"split refers to unknown record_id {rid!r}")

    @property
    def n_classes(self) -> int:
        return len(self.class_table)

    def split_of(self, record_id: str) -> Split:
        return self.split.get(record_id, Split.UNASSIGNED)

    def class_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_table)}

    def with_split(self, updates: Mapping[str, Split]) -> "DatasetManifest":
        merged = dict(self.split)
        merged.update(updates)
        return replace(self, split=merged)

    def __len__(self) -> int:
        return len(self.records)


def build_manifest(
    records: Iterable[ImageRecord],
    provenance: str = "",
    seed: Optional[int] = None,
    split: Optional[Mapping[str, Split]] = None,
) -> DatasetManifest:
    """Assemble a manifest, assigning class ids by sorted class name."""
    records = list(records)
    names = sorted({r.class_name for r in records})
    index = {n: i for i, n in enumerate(names)}
    records = [replace(r, class_id=index[r.class_name]) for r in records]
    return DatasetManifest(records, names, split or {}, provenance, seed)


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "class_table": list(m.class_table),
        "provenance": m.provenance,
        "seed": m.seed,
    }
    lines = [json.dumps(header, ensure_ascii=False, sort_keys=True)]
    for r in m.records:
        d = r.to_dict()
        d["split"] = m.split_of(r.record_id).value
        lines.append(json.dumps(d, ensure_ascii=False, sort_keys=True))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot write manifest to {path}: {e}") from e


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty file (missing header line)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: header is not valid JSON: {e}") from e
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ManifestError(f"{path}:1: unsupported format/version {header.get('format')}/{header.get('version')}")
    records, split = [], {}
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            d = json.loads(ln)
            r = ImageRecord.from_dict(d)
            s = Split(d.get("split", Split.UNASSIGNED.value))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise ManifestError(f"{path}:{lineno}: malformed record: {e!r}") from e
        records.append(r)
        if s is not Split.UNASSIGNED:
            split[r.record_id] = s
    try:
        return DatasetManifest(records, header.get("class_table", []), split,
                               header.get("provenance", ""), header.get("seed"))
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from e


def filter_records(m: DatasetManifest, predicate: Callable[[ImageRecord], bool]) -> DatasetManifest:
    kept = [r for r in m.records if predicate(r)]
    ids = {r.record_id for r in kept}
    split = {k: v for k, v in m.split.items() if k in ids}
    return DatasetManifest(kept, m.class_table, split, m.provenance, m.seed)


def merge_manifests(manifests: Sequence[DatasetManifest], provenance: str = "") -> DatasetManifest:
    """Concatenate manifests, re-deriving class ids over the union of class names."""
    records = [r for m in manifests for r in m.records]
    split = {k: v for m in manifests for k, v in m.split.items()}
    seeds = {m.seed for m in manifests if m.seed is not None}
    return build_manifest(records, provenance, seeds.pop() if len(seeds) == 1 else None, split)


def stable_int(*parts) -> int:
    """64-bit integer derived from the parts' string forms; identical on every platform."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


@dataclass(frozen=True)
class SeededRng:
    """Seed plus generator name; every stochastic stage draws from one of these."""

    seed: int
    algorithm_id: str = "numpy.PCG64"

    def __post_init__(self):
        if self.algorithm_id != "numpy.PCG64":
            raise ConfigError(f"unsupported rng algorithm {self.algorithm_id!r}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed & 0xFFFFFFFFFFFFFFFF))

    def child(self, *keys) -> "SeededRng":
        """Independent stream for a named sub-task (e.g. a class id or record id)."""
        return SeededRng(stable_int(self.seed, *keys), self.algorithm_id)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_order(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    return sorted(records, key=lambda r: r.record_id)
