"""Desk-scale stand-in for a curated-vs-field domain gap.

Each class is a random binary glyph. Source images show the glyph centred on
a plain background; target images draw the same glyph through field-like
nuisances (background clutter, blur, offset and brightness jitter), in bursts
of near-identical frames the way a time-lapse trap produces them.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageFilter

from ..core import DatasetManifest, Domain, ImageRecord, SeededRng, build_manifest

BACKGROUND = 0.85
INK = 0.15


@dataclass
class SyntheticDomainSpec:
    n_classes: int = 5
    per_class_per_domain: int = 20
    image_size: int = 32
    glyph_grid: int = 5
    glyph_scale: float = 0.6  # glyph side as a fraction of image side
    noise_std: float = 0.03  # both domains
    source_clutter: int = 0  # rectangles per source frame
    source_offset_jitter: int = 1
    clutter: int = 6  # rectangles per target frame
    blur_radius: float = 1.0
    offset_jitter: int = 5  # pixels, target only
    brightness_jitter: float = 0.25
    burst_size: int = 5
    glyph_variation: int = 0  # glyph cells flipped per individual, both domains
    seed: int = 0

    @property
    def class_names(self) -> list[str]:
        return [f"glyph_{k:02d}" for k in range(self.n_classes)]

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


def class_glyphs(spec: SyntheticDomainSpec) -> list[np.ndarray]:
    """Distinct binary patterns, one per class; depends only on (seed, grid, n_classes)."""
    g = SeededRng(spec.seed).child("glyphs").generator()
    glyphs: list[np.ndarray] = []
    while len(glyphs) < spec.n_classes:
        cand = g.random((spec.glyph_grid, spec.glyph_grid)) < 0.5
        if cand.sum() < spec.glyph_grid ** 2 // 3:
            continue
        if any((cand == other).all() for other in glyphs):
            continue
        glyphs.append(cand)
    return glyphs


def individual_glyph(spec: SyntheticDomainSpec, class_id: int, individual: str) -> np.ndarray:
    """Class glyph with ``glyph_variation`` cells flipped for one individual."""
    glyph = class_glyphs(spec)[class_id].copy()
    if spec.glyph_variation:
        g = SeededRng(spec.seed).child("individual", individual).generator()
        cells = g.choice(glyph.size, spec.glyph_variation, replace=False)
        glyph.flat[cells] = ~glyph.flat[cells]
    return glyph


def _stamp(canvas: np.ndarray, glyph: np.ndarray, spec: SyntheticDomainSpec, dx: int, dy: int, ink) -> None:
    size = spec.image_size
    cell = max(1, int(round(size * spec.glyph_scale / spec.glyph_grid)))
    mask = np.kron(glyph, np.ones((cell, cell), dtype=bool))
    h = mask.shape[0]
    y0 = (size - h) // 2 + dy
    x0 = (size - h) // 2 + dx
    ys, xs = np.nonzero(mask)
    ys, xs = ys + y0, xs + x0
    ok = (ys >= 0) & (ys < size) & (xs >= 0) & (xs < size)
    canvas[ys[ok], xs[ok]] = ink


def render_canonical(spec: SyntheticDomainSpec, glyph: np.ndarray) -> np.ndarray:
    """Noise-free, centred rendering of a glyph; HxWx3 floats in [0, 1]."""
    canvas = np.full((spec.image_size, spec.image_size, 3), BACKGROUND)
    _stamp(canvas, glyph, spec, 0, 0, INK)
    return canvas


def _to_image(a: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8), "RGB")


def render_frame(spec: SyntheticDomainSpec, glyph: np.ndarray, domain: Domain,
                 scene: np.random.Generator, frame: np.random.Generator) -> Image.Image:
    """``scene`` draws are shared by a burst; ``frame`` draws are per image."""
    size = spec.image_size
    tint = scene.uniform(-0.05, 0.05, 3)
    target = domain is Domain.TARGET
    j = spec.offset_jitter if target else spec.source_offset_jitter
    dx, dy = (int(v) for v in scene.integers(-j, j + 1, 2))
    canvas = np.full((size, size, 3), BACKGROUND)
    for _ in range(spec.clutter if target else spec.source_clutter):
        w, h = (int(v) for v in scene.integers(2, max(3, size // 4), 2))
        x, y = (int(v) for v in scene.integers(0, size, 2))
        canvas[y:y + h, x:x + w] = scene.uniform(0.0, 1.0)
    _stamp(canvas, glyph, spec, dx, dy, np.clip(INK + tint, 0, 1))
    img = canvas
    if target:
        if spec.blur_radius > 0:
            img = np.asarray(_to_image(img).filter(ImageFilter.GaussianBlur(spec.blur_radius)), float) / 255.0
        img = img * (1.0 + scene.uniform(-spec.brightness_jitter, spec.brightness_jitter))
    img = img + frame.normal(0.0, spec.noise_std, img.shape)
    return _to_image(img)


def generate_synthetic_dataset(spec: SyntheticDomainSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    root = SeededRng(spec.seed)
    records = []
    for k, name in enumerate(spec.class_names):
        for domain in (Domain.SOURCE, Domain.TARGET):
            folder = out_dir / "images" / domain.value.lower() / name
            folder.mkdir(parents=True, exist_ok=True)
            burst = max(1, spec.burst_size) if domain is Domain.TARGET else 1
            for i in range(spec.per_class_per_domain):
                individual = f"{domain.value.lower()}:{name}:{i // burst:04d}"
                scene = root.child("scene", individual).generator()
                frame = root.child("frame", domain.value, k, i).generator()
                img = render_frame(spec, individual_glyph(spec, k, individual), domain, scene, frame)
                buf = io.BytesIO()
                img.save(buf, format="PNG")
                data = buf.getvalue()
                path = folder / f"{i:04d}.png"
                path.write_bytes(data)
                records.append(ImageRecord(
                    record_id=f"syn:{domain.value.lower()}:{name}:{i:04d}", class_id=k, class_name=name,
                    domain=domain, uri=str(path), width_px=spec.image_size, height_px=spec.image_size,
                    occurrence_id=individual, checksum=hashlib.sha256(data).hexdigest(),
                ))
    return build_manifest(records, f"synthetic spec={asdict(spec)}", spec.seed)


class SyntheticTeacher:
    """Frozen random projection of a clean, centred re-rendering of each record's glyph.

    The glyph is recovered from the record's class and individual id, never
    from the pixels handed in, so embeddings are identical across domains by
    construction.
    """

    def __init__(self, spec: SyntheticDomainSpec, embed_dim: int = 32, seed: int = 1234):
        self.spec = spec
        self.embed_dim = embed_dim
        self.names = {n: k for k, n in enumerate(spec.class_names)}
        d_in = spec.image_size * spec.image_size * 3
        g = SeededRng(seed).child("teacher-projection").generator()
        self.projection = g.normal(0.0, 1.0, (d_in, embed_dim)) / np.sqrt(d_in) * 4.0
        self.fingerprint = f"synthetic-teacher-{spec.fingerprint()}-d{embed_dim}-s{seed}"

    def embed_glyph(self, glyph: np.ndarray) -> np.ndarray:
        return ((render_canonical(self.spec, glyph).ravel() - BACKGROUND) @ self.projection).astype(np.float32)

    def encode(self, pixels: np.ndarray, records: Sequence[ImageRecord]) -> np.ndarray:
        return np.stack([
            self.embed_glyph(individual_glyph(self.spec, self.names[r.class_name], r.occurrence_id or ""))
            for r in records
        ])


def save_spec(spec: SyntheticDomainSpec, path) -> None:
    Path(path).write_text(json.dumps(asdict(spec), indent=2, sort_keys=True), encoding="utf-8")


def load_spec(path) -> SyntheticDomainSpec:
    return SyntheticDomainSpec(**json.loads(Path(path).read_text(encoding="utf-8")))
