"""Content-addressed store of per-image embedding vectors.

Layout under ``root``::

    index.jsonl                     one {"fingerprint", "record_id", "key"} per line
    <sha256(fingerprint)[:16]>/<key>.npy    the vector

``key`` is the sha256 of the image content, so byte-identical images share
one entry. Writers take an exclusive file lock; readers do not lock.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock

CACHE_ENV = "SHIFTKD_CACHE"


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "shiftkd"))


class EmbeddingCache:
    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_cache_root()
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))

    def _path(self, fingerprint: str, key: str) -> Path:
        return self.root / hashlib.sha256(fingerprint.encode()).hexdigest()[:16] / f"{key}.npy"

    def get(self, fingerprint: str, key: str) -> Optional[np.ndarray]:
        p = self._path(fingerprint, key)
        if not p.exists():
            return None
        return np.load(p, allow_pickle=False)

    def put(self, fingerprint: str, key: str, vector: np.ndarray, record_id: str = "") -> None:
        p = self._path(fingerprint, key)
        with self._lock:
            p.parent.mkdir(parents=True, exist_ok=True)
            tmp = p.with_suffix(".tmp.npy")
            np.save(tmp, np.asarray(vector), allow_pickle=False)
            os.replace(tmp, p)
            with open(self.root / "index.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps({"fingerprint": fingerprint, "record_id": record_id, "key": key}) + "\n")

    def index(self) -> list[dict]:
        p = self.root / "index.jsonl"
        if not p.exists():
            return []
        return [json.loads(ln) for ln in p.read_text(encoding="utf-8").split("\n") if ln.strip()]
