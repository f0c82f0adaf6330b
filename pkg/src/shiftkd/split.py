"""Leakage-resistant train/test splitting.

Target-domain images of one class are embedded, grouped by agglomerative
clustering on cosine distance, and the clusters are laid out in a seeded
random order; the first ``n_test`` images of that layout become TEST. Near
duplicates (consecutive time-lapse frames) therefore land on the same side,
except for the one cluster that straddles the boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig
from .cache import EmbeddingCache
from .core import (ConfigError, DataError, DatasetManifest, Domain, ImageRecord, SeededRng, Split,
                   canonical_order)
from .encoders import Encoder, encode_records

LINKAGES = ("average", "complete", "single")


@dataclass
class ClusterConfig:
    k_min: int = 5
    distance: str = "cosine"
    linkage: str = "average"
    embed_dim: Optional[int] = None

    def __post_init__(self):
        self.linkage = self.linkage.lower()
        self.distance = self.distance.lower()
        if self.k_min < 1:
            raise ConfigError("k_min must be >= 1")
        if self.distance != "cosine":
            raise ConfigError(f"unsupported distance {self.distance!r}")
        if self.linkage not in LINKAGES:
            raise ConfigError(f"linkage must be one of {LINKAGES}")


@dataclass(frozen=True)
class EmbeddingBatch:
    record_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "record_ids", tuple(self.record_ids))
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            v = v.reshape(len(self.record_ids), -1)
        object.__setattr__(self, "vectors", v)
        if v.shape[0] != len(self.record_ids):
            raise DataError(f"{len(self.record_ids)} record ids but {v.shape[0]} vectors")
        if len(set(self.record_ids)) != len(self.record_ids):
            raise DataError("duplicate record ids in embedding batch")
        if not np.all(np.isfinite(v)):
            raise DataError("embedding batch contains non-finite values")

    def __len__(self) -> int:
        return len(self.record_ids)

    def subset(self, ids: Sequence[str]) -> "EmbeddingBatch":
        pos = {rid: i for i, rid in enumerate(self.record_ids)}
        try:
            rows = [pos[i] for i in ids]
        except KeyError as e:
            raise DataError(f"no embedding for record {e.args[0]!r}") from None
        return EmbeddingBatch(tuple(ids), self.vectors[rows])


@dataclass(frozen=True)
class ClusterAssignment:
    class_id: int
    record_ids: tuple[str, ...]  # canonical (sorted) order
    labels: tuple[int, ...]
    n_clusters: int

    @property
    def assignment(self) -> dict[str, int]:
        return dict(zip(self.record_ids, self.labels))

    def members(self, cluster: int) -> list[str]:
        return [r for r, c in zip(self.record_ids, self.labels) if c == cluster]


def embed_images(
    m: DatasetManifest,
    encoder: Encoder,
    cache: Optional[EmbeddingCache] = None,
    cfg: Optional[AugmentConfig] = None,
) -> EmbeddingBatch:
    vecs = encode_records(m.records, encoder, cache, cfg)
    return EmbeddingBatch(tuple(r.record_id for r in m.records), vecs)


def n_clusters_for(n: int, cfg: ClusterConfig) -> int:
    if n < 1:
        raise ValueError("need at least one record")
    return min(n, max(cfg.k_min, math.isqrt(n)))


def cosine_distances(vectors: np.ndarray, record_ids: Sequence[str] = ()) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        name = record_ids[zero[0]] if len(record_ids) else f"row {zero[0]}"
        raise DataError(f"zero-norm embedding for record {name}: cosine distance undefined")
    x = x / norms[:, None]
    d = np.clip(1.0 - x @ x.T, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def agglomerate(dist: np.ndarray, n_clusters: int, linkage: str = "average") -> np.ndarray:
    """Bottom-up merge until ``n_clusters`` remain; returns contiguous labels.

    A cluster lives in the slot of its lowest member index. Among equal
    distances the pair with lexicographically smallest (low slot, high slot)
    merges first, which row-major argmin over the upper triangle gives us.
    Labels are numbered by each cluster's lowest member index.
    """
    n = dist.shape[0]
    d = np.array(dist, dtype=np.float64)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    d[~upper] = np.inf
    full = np.array(dist, dtype=np.float64)
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = [[i] for i in range(n)]
    for _ in range(n - n_clusters):
        flat = int(np.argmin(d))
        i, j = divmod(flat, n)
        ni, nj = sizes[i], sizes[j]
        if linkage == "average":
            new = (ni * full[i] + nj * full[j]) / (ni + nj)
        elif linkage == "complete":
            new = np.maximum(full[i], full[j])
        else:
            new = np.minimum(full[i], full[j])
        full[i, :] = new
        full[:, i] = new
        full[i, i] = 0.0
        sizes[i] = ni + nj
        active[j] = False
        members[i].extend(members[j])
        members[j] = []
        d[j, :] = np.inf
        d[:, j] = np.inf
        row = np.where(active & (np.arange(n) > i), new, np.inf)
        col = np.where(active & (np.arange(n) < i), new, np.inf)
        d[i, :] = row
        d[:, i] = col
    labels = np.empty(n, dtype=np.int64)
    for label, slot in enumerate(np.flatnonzero(active)):
        labels[members[slot]] = label
    return labels


def cluster_class(e: EmbeddingBatch, cfg: ClusterConfig, class_id: int = -1) -> ClusterAssignment:
    if len(e) == 0:
        raise DataError("cannot cluster an empty embedding batch")
    ids = sorted(e.record_ids)
    e = e.subset(ids)
    k = n_clusters_for(len(ids), cfg)
    labels = agglomerate(cosine_distances(e.vectors, ids), k, cfg.linkage)
    return ClusterAssignment(class_id, tuple(ids), tuple(int(x) for x in labels), k)


def cluster_layout(a: ClusterAssignment, rng: SeededRng) -> list[str]:
    """Record ids laid out cluster by cluster in a seeded random cluster order."""
    order = rng.generator().permutation(a.n_clusters)
    return [rid for c in order for rid in a.members(int(c))]


def split_by_clusters(a: ClusterAssignment, n_test: int, rng: SeededRng) -> dict[str, Split]:
    if n_test > len(a.record_ids):
        raise DataError(f"class {a.class_id}: n_test={n_test} exceeds {len(a.record_ids)} records")
    layout = cluster_layout(a, rng)
    return {rid: (Split.TEST if i < n_test else Split.TRAIN) for i, rid in enumerate(layout)}


def _class_groups(records: Sequence[ImageRecord], domain: Domain) -> dict[int, list[ImageRecord]]:
    groups: dict[int, list[ImageRecord]] = {}
    for r in records:
        if r.domain is domain:
            groups.setdefault(r.class_id, []).append(r)
    return {c: canonical_order(rs) for c, rs in sorted(groups.items())}


def split_source_random(
    m: DatasetManifest, n_test_per_class: int, rng: SeededRng, domain: Domain = Domain.SOURCE
) -> dict[str, Split]:
    out: dict[str, Split] = {}
    for class_id, rs in _class_groups(m.records, domain).items():
        if len(rs) < n_test_per_class:
            raise DataError(
                f"class {m.class_table[class_id]!r}: {len(rs)} records, cannot withhold {n_test_per_class}"
            )
        test = set(rng.child("random", class_id).generator().choice(len(rs), n_test_per_class, replace=False).tolist())
        out.update({r.record_id: (Split.TEST if i in test else Split.TRAIN) for i, r in enumerate(rs)})
    return out


def split_target_clustered(
    m: DatasetManifest,
    embeddings: EmbeddingBatch,
    n_test_per_class: int,
    cfg: ClusterConfig,
    rng: SeededRng,
) -> tuple[dict[str, Split], list[ClusterAssignment]]:
    """Cluster-aware split of every class's TARGET records."""
    out: dict[str, Split] = {}
    assignments = []
    for class_id, rs in _class_groups(m.records, Domain.TARGET).items():
        a = cluster_class(embeddings.subset([r.record_id for r in rs]), cfg, class_id)
        assignments.append(a)
        out.update(split_by_clusters(a, n_test_per_class, rng.child("clusters", class_id)))
    return out, assignments


def straddling_clusters(a: ClusterAssignment, split: dict[str, Split]) -> list[int]:
    """Clusters that hold both TEST and TRAIN records."""
    out = []
    for c in range(a.n_clusters):
        sides = {split[r] for r in a.members(c)}
        if len(sides) > 1:
            out.append(c)
    return out
