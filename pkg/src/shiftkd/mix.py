"""Domain-mixed training sets at requested target-domain fractions.

Rule: keep every source image and add target images until the requested
fraction is reached; once the target pool is exhausted, shrink the source
side instead. Counts are floored.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence, Union

from .core import (ConfigError, DataError, DatasetManifest, Domain, SeededRng, Split, canonical_order,
                   save_manifest)

STANDARD_FRACTIONS = (0.0, 0.01, 0.05, 0.10, 0.20, 0.25, 0.33, 0.50)


def _exact(f: Union[float, Fraction, str]) -> Fraction:
    # decimal literal, not the binary double: 0.25 * 18573 / 0.75 must floor to 6191
    if isinstance(f, Fraction):
        return f
    return Fraction(repr(float(f)) if not isinstance(f, str) else f)


@dataclass(frozen=True)
class MixSpec:
    target_fraction: float
    source_available: int
    target_available: int

    def __post_init__(self):
        if not 0 <= _exact(self.target_fraction) <= 1:
            raise ConfigError(f"target fraction {self.target_fraction} outside [0, 1]")
        if self.source_available < 0 or self.target_available < 0:
            raise ConfigError("available counts must be non-negative")


@dataclass(frozen=True)
class MixResult:
    n_target: int
    n_source: int

    @property
    def total(self) -> int:
        return self.n_target + self.n_source

    @property
    def achieved_fraction(self) -> float:
        return self.n_target / self.total if self.total else 0.0


def resolve_mix(spec: MixSpec) -> MixResult:
    f = _exact(spec.target_fraction)
    S, T = spec.source_available, spec.target_available
    if f == 0:
        return MixResult(0, S)
    if f == 1:
        if T == 0:
            raise DataError("target fraction 1 requested but no target images are available")
        return MixResult(T, 0)
    t_star = math.floor(f * S / (1 - f))
    if t_star <= T:
        return MixResult(t_star, S)
    return MixResult(T, min(S, math.floor(T * (1 - f) / f)))


def balanced_counts(total: int, caps: Mapping[int, int], rng: SeededRng) -> dict[int, int]:
    """Spread ``total`` over classes as evenly as their caps allow.

    Every class gets ``min(cap, level)``; the leftover units go one each to
    uncapped classes picked by a seeded shuffle.
    """
    classes = sorted(caps)
    if total > sum(caps.values()):
        raise DataError(f"need {total} records but only {sum(caps.values())} available")
    if total == 0 or not classes:
        return {c: 0 for c in classes}
    lo, hi = 0, max(caps.values())
    while lo < hi:  # largest level whose filled amount does not exceed total
        mid = (lo + hi + 1) // 2
        if sum(min(caps[c], mid) for c in classes) <= total:
            lo = mid
        else:
            hi = mid - 1
    counts = {c: min(caps[c], lo) for c in classes}
    rem = total - sum(counts.values())
    room = [c for c in classes if caps[c] > lo]
    order = rng.generator().permutation(len(room))
    for k in order[:rem]:
        counts[room[int(k)]] += 1
    return counts


def _train_pools(base: DatasetManifest, domain: Domain) -> dict[int, list]:
    pools: dict[int, list] = {c: [] for c in range(base.n_classes)}
    for r in base.records:
        if r.domain is domain and base.split_of(r.record_id) is Split.TRAIN:
            pools[r.class_id].append(r)
    return {c: canonical_order(rs) for c, rs in pools.items()}


def allocate_per_class(result: MixResult, base: DatasetManifest, rng: SeededRng,
                       provenance: str = "") -> DatasetManifest:
    """Sample ``result``'s per-domain counts from the TRAIN records of ``base``."""
    chosen: set[str] = set()
    for domain, need in ((Domain.TARGET, result.n_target), (Domain.SOURCE, result.n_source)):
        pools = _train_pools(base, domain)
        try:
            counts = balanced_counts(need, {c: len(p) for c, p in pools.items()}, rng.child("counts", domain.value))
        except DataError as e:
            raise DataError(f"{domain.value}: insufficient TRAIN records: {e}") from None
        for c, k in counts.items():
            if k:
                g = rng.child("pick", domain.value, c).generator()
                picks = g.choice(len(pools[c]), k, replace=False)
                chosen.update(pools[c][int(i)].record_id for i in picks)
    records = [r for r in base.records if r.record_id in chosen]
    return DatasetManifest(records, base.class_table, {r.record_id: Split.TRAIN for r in records},
                           provenance, rng.seed)


def available_counts(base: DatasetManifest) -> tuple[int, int]:
    """(source, target) TRAIN record counts."""
    s = sum(1 for r in base.records if r.domain is Domain.SOURCE and base.split_of(r.record_id) is Split.TRAIN)
    t = sum(1 for r in base.records if r.domain is Domain.TARGET and base.split_of(r.record_id) is Split.TRAIN)
    return s, t


def build_mix_suite(fractions: Sequence[float], base: DatasetManifest, rng: SeededRng) -> list[DatasetManifest]:
    S, T = available_counts(base)
    out = []
    for f in fractions:
        res = resolve_mix(MixSpec(f, S, T))
        prov = f"mix target_fraction={f} n_target={res.n_target} n_source={res.n_source} seed={rng.seed}"
        out.append(allocate_per_class(res, base, rng.child("mix", repr(float(f))), prov))
    return out


def mix_filename(f: float) -> str:
    return f"mix_{float(f) * 100:05.1f}pct.jsonl"


STATS_COLUMNS = ("target_mix_pct", "target_contribution", "source_contribution", "total_size", "achieved_fraction")


def write_mix_stats(rows: Sequence[tuple[float, MixResult]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for f, r in rows:
            w.writerow([f"{float(f) * 100:g}", r.n_target, r.n_source, r.total, f"{r.achieved_fraction:.6f}"])


def write_mix_suite(fractions: Sequence[float], base: DatasetManifest, rng: SeededRng, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    S, T = available_counts(base)
    paths = []
    for f, m in zip(fractions, build_mix_suite(fractions, base, rng)):
        p = out_dir / mix_filename(f)
        save_manifest(m, p)
        paths.append(p)
    write_mix_stats([(f, resolve_mix(MixSpec(f, S, T))) for f in fractions], out_dir / "mix_stats.csv")
    return paths
