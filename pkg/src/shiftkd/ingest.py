"""Source-domain download from an occurrence API and target-domain crop registration."""
from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

from PIL import Image, UnidentifiedImageError

from .core import ConfigError, DataError, DatasetManifest, Domain, ImageRecord, SeededRng, build_manifest, canonical_order, sha256_file

log = logging.getLogger(__name__)

API_ENV = "SHIFTKD_OCCURRENCE_API"
TOKEN_ENV = "SHIFTKD_OCCURRENCE_TOKEN"
DEFAULT_API = "https://api.gbif.org/v1"
ADULT_STAGES = ("imago", "adult")
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}


class ApiUnavailable(DataError):
    pass


class UnknownSpecies(DataError):
    pass


class QuotaError(DataError):
    def __init__(self, shortfalls: Mapping[tuple[str, str], int]):
        self.shortfalls = dict(shortfalls)
        parts = [f"{name} [{dom}] short by {n}" for (name, dom), n in sorted(self.shortfalls.items())]
        super().__init__("classes below quota: " + "; ".join(parts))


@dataclass
class SpeciesQuery:
    species_key: str
    class_name: str
    max_images: int = 224
    life_stage_filter: tuple[str, ...] = ADULT_STAGES
    one_per_occurrence: bool = True

    def __post_init__(self):
        if self.max_images < 1:
            raise ConfigError("max_images must be >= 1")


@dataclass
class QuotaPlan:
    per_class_source_train: int = 184
    per_class_source_test: int = 20
    per_class_target_total: int = 110
    per_class_target_test: int = 10

    def __post_init__(self):
        vals = (self.per_class_source_train, self.per_class_source_test,
                self.per_class_target_total, self.per_class_target_test)
        if min(vals) < 0:
            raise ConfigError("quotas must be non-negative")
        if self.per_class_target_test > self.per_class_target_total:
            raise ConfigError("target test quota exceeds target total")

    def quota(self, domain: Domain) -> int:
        if domain is Domain.SOURCE:
            return self.per_class_source_train + self.per_class_source_test
        return self.per_class_target_total


# -- API clients ----------------------------------------------------------

class OccurrenceClient(Protocol):
    def search(self, species_key: str, offset: int, limit: int) -> dict: ...

    def download(self, url: str) -> bytes: ...


class TokenBucket:
    def __init__(self, rate: float, capacity: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        self.rate, self.capacity = rate, capacity
        self.tokens = capacity
        self.clock, self.sleep = clock, sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                self.sleep((1 - self.tokens) / self.rate)


class GbifClient:
    """Thin HTTP client for the occurrence search and media endpoints."""

    def __init__(self, base_url: Optional[str] = None, requests_per_sec: float = 5.0, max_retries: int = 4,
                 backoff: float = 1.0, timeout: float = 30.0, session=None, sleep=time.sleep):
        import requests

        self.base_url = (base_url or os.environ.get(API_ENV, DEFAULT_API)).rstrip("/")
        self.session = session or requests.Session()
        token = os.environ.get(TOKEN_ENV)
        if token:
            self.session.headers["Authorization"] = f"Bearer {token}"
        self.bucket = TokenBucket(requests_per_sec, sleep=sleep)
        self.max_retries, self.backoff, self.timeout = max_retries, backoff, timeout
        self.sleep = sleep

    def _get(self, url: str, params=None):
        import requests

        for attempt in range(self.max_retries + 1):
            self.bucket.acquire()
            log.info("GET %s %s", url, params or "")
            try:
                resp = self.session.get(url, params=params, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                err = e
            else:
                if resp.status_code < 500 and resp.status_code != 429:
                    return resp
                err = RuntimeError(f"HTTP {resp.status_code}")
            if attempt < self.max_retries:
                self.sleep(self.backoff * 2 ** attempt)
        raise ApiUnavailable(f"{url}: giving up after {self.max_retries + 1} attempts ({err})")

    def search(self, species_key, offset, limit):
        resp = self._get(f"{self.base_url}/occurrence/search", {
            "taxonKey": species_key, "mediaType": "StillImage", "offset": offset, "limit": limit,
        })
        if resp.status_code in (400, 404):
            raise UnknownSpecies(f"species key {species_key!r} rejected by API (HTTP {resp.status_code})")
        resp.raise_for_status()
        return resp.json()

    def download(self, url):
        resp = self._get(url)
        resp.raise_for_status()
        return resp.content


class FixtureClient:
    """Replays a recorded fixture: {"species": {key: [occurrence, ...]}, "media": {url: base64}}."""

    def __init__(self, fixture):
        if isinstance(fixture, (str, Path)):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self.species = {str(k): v for k, v in fixture.get("species", {}).items()}
        self.media = fixture.get("media", {})
        self.calls: list[tuple] = []

    def search(self, species_key, offset, limit):
        self.calls.append(("search", species_key, offset, limit))
        if str(species_key) not in self.species:
            raise UnknownSpecies(f"species key {species_key!r} not in fixture")
        occ = self.species[str(species_key)]
        page = occ[offset:offset + limit]
        return {"results": page, "offset": offset, "limit": limit, "endOfRecords": offset + limit >= len(occ)}

    def download(self, url):
        self.calls.append(("download", url))
        if url not in self.media:
            raise DataError(f"media {url} not in fixture")
        return base64.b64decode(self.media[url])


# -- source fetch ---------------------------------------------------------

@dataclass
class FetchResult:
    records: list[ImageRecord]
    shortfall: int = 0
    warnings: list[str] = field(default_factory=list)


def is_adult(occurrence: Mapping, stages: Iterable[str] = ADULT_STAGES) -> bool:
    stage = occurrence.get("lifeStage")
    return isinstance(stage, str) and stage.strip().lower() in {s.lower() for s in stages}


def first_still_image(occurrence: Mapping) -> Optional[str]:
    for m in occurrence.get("media") or []:
        if m.get("type", "StillImage") == "StillImage" and m.get("identifier"):
            return m["identifier"]
    return None


def _occ_sort_key(occ_id: str):
    return (0, int(occ_id), "") if occ_id.isdigit() else (1, 0, occ_id)


def _iter_occurrences(client: OccurrenceClient, key: str, page_size: int):
    offset = 0
    while True:
        page = client.search(key, offset, page_size)
        results = page.get("results", [])
        yield from results
        if page.get("endOfRecords", True) or not results:
            return
        offset += len(results)


def fetch_source_class(q: SpeciesQuery, client: OccurrenceClient, media_dir, page_size: int = 300,
                       parallelism: int = 4) -> FetchResult:
    media_dir = Path(media_dir)
    media_dir.mkdir(parents=True, exist_ok=True)
    cands: list[tuple[str, str]] = []
    seen_occ: set[str] = set()
    for occ in _iter_occurrences(client, q.species_key, page_size):
        if not is_adult(occ, q.life_stage_filter):
            continue
        url = first_still_image(occ)
        occ_id = str(occ.get("key", occ.get("gbifID", "")))
        if url is None or not occ_id:
            continue
        if q.one_per_occurrence and occ_id in seen_occ:
            continue
        seen_occ.add(occ_id)
        cands.append((occ_id, url))
    cands.sort(key=lambda c: _occ_sort_key(c[0]))

    warnings: list[str] = []

    def fetch(c):
        occ_id, url = c
        try:
            data = client.download(url)
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                size = im.size
                fmt = (im.format or "jpeg").lower()
        except (DataError, OSError, UnidentifiedImageError) as e:
            return occ_id, url, None, None, str(e)
        return occ_id, url, data, size, fmt

    records: list[ImageRecord] = []
    seen_sum: set[str] = set()
    pos = 0
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        while len(records) < q.max_images and pos < len(cands):
            chunk = cands[pos:pos + (q.max_images - len(records))]
            pos += len(chunk)
            for occ_id, url, data, size, fmt in pool.map(fetch, chunk):  # map keeps input order
                if data is None:
                    warnings.append(f"occurrence {occ_id}: media {url} failed: {fmt}")
                    continue
                digest = hashlib.sha256(data).hexdigest()
                if digest in seen_sum:
                    warnings.append(f"occurrence {occ_id}: duplicate media checksum, skipped")
                    continue
                seen_sum.add(digest)
                ext = "jpg" if fmt == "jpeg" else fmt
                path = media_dir / f"{digest}.{ext}"
                if not path.exists():
                    path.write_bytes(data)
                records.append(ImageRecord(
                    record_id=f"src:{occ_id}", class_id=0, class_name=q.class_name, domain=Domain.SOURCE,
                    uri=str(path), width_px=size[0], height_px=size[1], occurrence_id=occ_id, checksum=digest,
                ))
    shortfall = max(0, q.max_images - len(records))
    if shortfall:
        warnings.append(f"{q.class_name}: only {len(records)} of {q.max_images} images available")
    for w in warnings:
        log.warning(w)
    return FetchResult(records, shortfall, warnings)


def read_species_list(path) -> list[tuple[str, str]]:
    """CSV/TSV with columns species_key, class_name."""
    text = Path(path).read_text(encoding="utf-8")
    dialect = "excel-tab" if "\t" in text.splitlines()[0] else "excel"
    rows = list(csv.DictReader(io.StringIO(text), dialect=dialect))
    try:
        return [(r["species_key"].strip(), r["class_name"].strip()) for r in rows]
    except KeyError as e:
        raise DataError(f"{path}: species list needs columns species_key,class_name") from e


# -- target registration --------------------------------------------------

@dataclass
class TargetScan:
    records: list[ImageRecord]
    warnings: list[str] = field(default_factory=list)


def register_target_crops(root, class_map: Optional[Mapping[str, int]] = None) -> TargetScan:
    root = Path(root)
    records, warnings = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []:
        if class_map is not None and d.name not in class_map:
            warnings.append(f"unknown class directory {d.name!r}, skipped")
            continue
        cid = class_map[d.name] if class_map is not None else 0
        for f in sorted(p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTS):
            try:
                with Image.open(f) as im:
                    im.load()
                    w, h = im.size
            except (OSError, UnidentifiedImageError) as e:
                warnings.append(f"unreadable image {f}: {e}")
                continue
            records.append(ImageRecord(
                record_id=f"tgt:{d.name}/{f.relative_to(d).as_posix()}", class_id=cid, class_name=d.name,
                domain=Domain.TARGET, uri=str(f), width_px=w, height_px=h, checksum=sha256_file(f),
            ))
    for w in warnings:
        log.warning(w)
    return TargetScan(records, warnings)


# -- quotas -----------------------------------------------------------------

def enforce_quota(records: Sequence[ImageRecord], plan: QuotaPlan, rng: SeededRng,
                  domains: Sequence[Domain] = (Domain.SOURCE, Domain.TARGET),
                  provenance: str = "") -> DatasetManifest:
    """Uniformly subsample every (class, domain) group down to its quota."""
    groups: dict[tuple[str, Domain], list[ImageRecord]] = {}
    for r in records:
        groups.setdefault((r.class_name, r.domain), []).append(r)
    names = sorted({r.class_name for r in records})
    shortfalls, keep = {}, set()
    for name in names:
        for dom in domains:
            rs = canonical_order(groups.get((name, dom), []))
            quota = plan.quota(dom)
            if len(rs) < quota:
                shortfalls[(name, dom.value)] = quota - len(rs)
                continue
            idx = rng.child("quota", name, dom.value).generator().choice(len(rs), quota, replace=False)
            keep.update(rs[int(i)].record_id for i in idx)
    if shortfalls:
        raise QuotaError(shortfalls)
    kept = [r for r in records if r.record_id in keep]
    return build_manifest(kept, provenance or f"enforce_quota seed={rng.seed}", rng.seed)
