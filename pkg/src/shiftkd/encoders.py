"""Frozen feature extractors and the cached record -> vector loop.

An encoder is any object with a ``fingerprint`` string and
``encode(pixels, records) -> (B, D) array`` where ``pixels`` is the
eval-transformed (B, 3, H, W) batch. ``records`` is passed along for encoders
that render from metadata (the synthetic teacher); image encoders ignore it.
"""
from __future__ import annotations

import hashlib
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import AugmentConfig, stack_eval
from .cache import EmbeddingCache
from .core import DataError, ImageRecord, sha256_file


class Encoder(Protocol):
    fingerprint: str

    def encode(self, pixels: np.ndarray, records: Sequence[ImageRecord]) -> np.ndarray: ...


def load_image(uri: str) -> Image.Image:
    try:
        with Image.open(uri) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"unreadable image {uri}: {e}") from e


def record_key(r: ImageRecord) -> str:
    return r.checksum or sha256_file(r.uri)


def encode_records(
    records: Sequence[ImageRecord],
    encoder: Encoder,
    cache: Optional[EmbeddingCache] = None,
    cfg: Optional[AugmentConfig] = None,
    batch_size: int = 32,
) -> np.ndarray:
    """One vector per record, in input order; cache hits skip the encoder."""
    cfg = cfg or AugmentConfig()
    out: list[Optional[np.ndarray]] = [None] * len(records)
    keys = [record_key(r) for r in records] if cache is not None else [None] * len(records)
    todo = []
    for i, key in enumerate(keys):
        hit = cache.get(encoder.fingerprint, key) if cache is not None else None
        if hit is None:
            todo.append(i)
        else:
            out[i] = hit
    for start in range(0, len(todo), batch_size):
        idx = todo[start:start + batch_size]
        batch = [records[i] for i in idx]
        pixels = stack_eval([load_image(r.uri) for r in batch], cfg)
        try:
            vecs = np.asarray(encoder.encode(pixels, batch), dtype=np.float32)
        except Exception as e:
            raise DataError(f"encoder {encoder.fingerprint} failed on {batch[0].record_id}..: {e}") from e
        if vecs.shape[0] != len(batch) or not np.all(np.isfinite(vecs)):
            raise DataError(f"encoder {encoder.fingerprint} returned bad output of shape {vecs.shape}")
        for i, v in zip(idx, vecs):
            out[i] = v
            if cache is not None:
                cache.put(encoder.fingerprint, keys[i], v, records[i].record_id)
    if not records:
        return np.zeros((0, 0), np.float32)
    return np.stack(out).astype(np.float32)


class PixelEncoder:
    """Block-averaged raw pixels; cheap, deterministic stand-in for a CNN embedder."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.fingerprint = f"pixel-grid{grid}"

    def encode(self, pixels, records=()):
        b, c, h, w = pixels.shape
        g = self.grid
        x = pixels[:, :, : h - h % g, : w - w % g].reshape(b, c, g, h // g, g, w // g)
        return x.mean(axis=(3, 5)).reshape(b, -1)


class TorchvisionEncoder:
    """Pooled penultimate features of a torchvision classifier (e.g. ImageNet ResNet-50)."""

    def __init__(self, arch: str = "resnet50", weights: Optional[str] = "IMAGENET1K_V1"):
        import torch
        import torchvision

        self.model = torchvision.models.get_model(arch, weights=weights)
        if hasattr(self.model, "fc"):
            self.model.fc = torch.nn.Identity()
        elif hasattr(self.model, "classifier"):
            self.model.classifier[-1] = torch.nn.Identity()
        self.model.eval()
        h = hashlib.sha256()
        for k, v in sorted(self.model.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        self.fingerprint = f"{arch}-{weights}-{h.hexdigest()[:16]}"

    def encode(self, pixels, records=()):
        import torch

        with torch.no_grad():
            return self.model(torch.from_numpy(np.ascontiguousarray(pixels))).numpy()


class CachedOnlyEncoder:
    """Stands in for a teacher whose weights are absent; every lookup must hit the cache."""

    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint

    def encode(self, pixels, records=()):
        ids = ", ".join(r.record_id for r in list(records)[:3])
        raise DataError(f"teacher weights missing and cache cold for {self.fingerprint} (records {ids}...)")
