"""Train-time augmentation: MixRes (source only) -> random op policy -> flip -> resize.

Every random choice is drawn from a caller-supplied numpy Generator so a
pipeline can be replayed from (seed, record_id, epoch). Operation magnitudes
follow torchvision's RandAugment bins (31 levels, magnitude index 0..30).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .core import ConfigError, Domain, SeededRng

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

OPS = (
    "Identity",
    "ShearX",
    "ShearY",
    "TranslateX",
    "TranslateY",
    "Rotate",
    "Brightness",
    "Color",
    "Contrast",
    "Sharpness",
    "Posterize",
    "Solarize",
    "AutoContrast",
    "Equalize",
)
SIGNED_OPS = {"ShearX", "ShearY", "TranslateX", "TranslateY", "Rotate",
              "Brightness", "Color", "Contrast", "Sharpness"}
N_BINS = 31


@dataclass
class AugmentConfig:
    mixres_enabled: bool = True
    mixres_sizes: tuple[int, int] = (75, 150)
    mixres_probs: tuple[float, float] = (0.25, 0.25)
    randaug_num_ops: int = 2
    randaug_magnitude: int = 3
    hflip_prob: float = 0.5
    final_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.mixres_sizes = tuple(int(s) for s in self.mixres_sizes)
        self.mixres_probs = tuple(float(p) for p in self.mixres_probs)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        probs = (*self.mixres_probs, self.hflip_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError(f"augment probabilities must lie in [0, 1], got {probs}")
        if sum(self.mixres_probs) > 1.0:
            raise ConfigError("mixres probabilities sum to more than 1")
        if len(self.mixres_sizes) != 2 or len(self.mixres_probs) != 2:
            raise ConfigError("mixres needs exactly two sizes and two probabilities")
        if min(*self.mixres_sizes, self.final_size) <= 0:
            raise ConfigError("augment sizes must be positive")
        if not 0 <= self.randaug_magnitude < N_BINS:
            raise ConfigError(f"randaug_magnitude must be in [0, {N_BINS - 1}]")
        if self.randaug_num_ops < 0:
            raise ConfigError("randaug_num_ops must be >= 0")


RngLike = Union[np.random.Generator, SeededRng]


def _gen(rng: RngLike) -> np.random.Generator:
    return rng.generator() if isinstance(rng, SeededRng) else rng


def _rgb(img: Image.Image) -> Image.Image:
    return img if img.mode == "RGB" else img.convert("RGB")


# -- MixRes ---------------------------------------------------------------

def mixres_size_for_draw(u: float, cfg: AugmentConfig) -> Optional[int]:
    """Side length selected by a uniform draw ``u`` in [0, 1), or None for no-op.

    Branch 0 owns [0, p0), branch 1 owns [p0, p0 + p1).
    """
    p0, p1 = cfg.mixres_probs
    if u < p0:
        return cfg.mixres_sizes[0]
    if u < p0 + p1:
        return cfg.mixres_sizes[1]
    return None


def mixres(img: Image.Image, domain: Domain, cfg: AugmentConfig, rng: RngLike) -> Image.Image:
    if domain is not Domain.SOURCE or not cfg.mixres_enabled:
        return img
    size = mixres_size_for_draw(float(_gen(rng).random()), cfg)
    if size is None:
        return img
    return img.resize((size, size), Image.BILINEAR)


# -- random op policy -----------------------------------------------------

def op_magnitude(op: str, magnitude: int, width: int, height: int):
    """Magnitude value of ``op`` at bin ``magnitude`` (torchvision RandAugment table)."""
    if op in ("ShearX", "ShearY"):
        return float(np.linspace(0.0, 0.3, N_BINS)[magnitude])
    if op == "TranslateX":
        return float(np.linspace(0.0, 150.0 / 331.0 * width, N_BINS)[magnitude])
    if op == "TranslateY":
        return float(np.linspace(0.0, 150.0 / 331.0 * height, N_BINS)[magnitude])
    if op == "Rotate":
        return float(np.linspace(0.0, 30.0, N_BINS)[magnitude])
    if op in ("Brightness", "Color", "Contrast", "Sharpness"):
        return float(np.linspace(0.0, 0.9, N_BINS)[magnitude])
    if op == "Posterize":
        return int(8 - np.round(np.arange(N_BINS) / ((N_BINS - 1) / 4))[magnitude])
    if op == "Solarize":
        return float(np.linspace(255.0, 0.0, N_BINS)[magnitude])
    return 0.0


def apply_op(img: Image.Image, op: str, value) -> Image.Image:
    w, h = img.size
    if op == "Identity":
        return img
    if op == "ShearX":
        return img.transform((w, h), Image.AFFINE, (1, value, 0, 0, 1, 0), Image.NEAREST, fillcolor=(0, 0, 0))
    if op == "ShearY":
        return img.transform((w, h), Image.AFFINE, (1, 0, 0, value, 1, 0), Image.NEAREST, fillcolor=(0, 0, 0))
    if op == "TranslateX":
        return img.transform((w, h), Image.AFFINE, (1, 0, value, 0, 1, 0), Image.NEAREST, fillcolor=(0, 0, 0))
    if op == "TranslateY":
        return img.transform((w, h), Image.AFFINE, (1, 0, 0, 0, 1, value), Image.NEAREST, fillcolor=(0, 0, 0))
    if op == "Rotate":
        return img.rotate(value, resample=Image.NEAREST, fillcolor=(0, 0, 0))
    if op == "Brightness":
        return ImageEnhance.Brightness(img).enhance(1.0 + value)
    if op == "Color":
        return ImageEnhance.Color(img).enhance(1.0 + value)
    if op == "Contrast":
        return ImageEnhance.Contrast(img).enhance(1.0 + value)
    if op == "Sharpness":
        return ImageEnhance.Sharpness(img).enhance(1.0 + value)
    if op == "Posterize":
        return ImageOps.posterize(img, int(value))
    if op == "Solarize":
        return ImageOps.solarize(img, value)
    if op == "AutoContrast":
        return ImageOps.autocontrast(img)
    if op == "Equalize":
        return ImageOps.equalize(img)
    raise ValueError(f"unknown op {op!r}")


@dataclass(frozen=True)
class PolicyDraw:
    """The random choices made by one application of the policy."""

    ops: tuple[str, ...]
    negate: tuple[bool, ...]
    flip: bool


def sample_policy(cfg: AugmentConfig, rng: RngLike) -> PolicyDraw:
    g = _gen(rng)
    ops, negate = [], []
    for _ in range(cfg.randaug_num_ops):
        op = OPS[int(g.integers(len(OPS)))]
        ops.append(op)
        negate.append(op in SIGNED_OPS and bool(g.integers(2)))
    flip = bool(g.random() < cfg.hflip_prob)
    return PolicyDraw(tuple(ops), tuple(negate), flip)


def apply_draw(img: Image.Image, draw: PolicyDraw, cfg: AugmentConfig) -> Image.Image:
    img = _rgb(img)
    for op, neg in zip(draw.ops, draw.negate):
        value = op_magnitude(op, cfg.randaug_magnitude, *img.size)
        img = apply_op(img, op, -value if neg else value)
    if draw.flip:
        img = img.transpose(Image.FLIP_LEFT_RIGHT)
    return resize_final(img, cfg)


def apply_policy(img: Image.Image, cfg: AugmentConfig, rng: RngLike) -> Image.Image:
    return apply_draw(img, sample_policy(cfg, rng), cfg)


def train_transform(img: Image.Image, domain: Domain, cfg: AugmentConfig, rng: RngLike) -> Image.Image:
    """Full train-time chain; all draws come from the one generator in a fixed order."""
    g = _gen(rng)
    return apply_policy(mixres(_rgb(img), domain, cfg, g), cfg, g)


# -- resize / normalise ---------------------------------------------------

def resize_final(img: Image.Image, cfg: AugmentConfig) -> Image.Image:
    if img.size == (cfg.final_size, cfg.final_size):
        return img
    return img.resize((cfg.final_size, cfg.final_size), Image.BILINEAR)


def normalize(img: Image.Image, cfg: AugmentConfig) -> np.ndarray:
    """HWC uint8 image -> CHW float32, standardised per channel."""
    a = np.asarray(_rgb(img), dtype=np.float32) / 255.0
    a = (a - np.asarray(cfg.mean, np.float32)) / np.asarray(cfg.std, np.float32)
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def eval_transform(img: Image.Image, cfg: AugmentConfig) -> np.ndarray:
    return normalize(resize_final(_rgb(img), cfg), cfg)


def stack_eval(images: Sequence[Image.Image], cfg: AugmentConfig) -> np.ndarray:
    if not images:
        return np.zeros((0, 3, cfg.final_size, cfg.final_size), np.float32)
    return np.stack([eval_transform(im, cfg) for im in images])
