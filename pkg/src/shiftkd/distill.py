"""Feature-hint distillation: loss terms, student-side adapter, freeze policy, teacher embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig
from .cache import EmbeddingCache
from .core import ConfigError, DataError, DatasetManifest, Split
from .encoders import Encoder, encode_records

ADAPTERS = ("auto", "identity", "linear")


@dataclass
class LossConfig:
    alpha: float = 0.5
    adapter: str = "auto"
    normalize_embeddings: bool = False

    def __post_init__(self):
        self.adapter = self.adapter.lower()
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.adapter not in ADAPTERS:
            raise ConfigError(f"adapter must be one of {ADAPTERS}")

    def resolved_adapter(self, c_student: int, c_teacher: int) -> str:
        if self.adapter == "auto":
            return "identity" if c_student == c_teacher else "linear"
        return self.adapter


@dataclass
class FreezePolicy:
    n_trainable_feature_blocks: int = 2
    head_trainable: bool = True


@dataclass(frozen=True)
class FeatureBatch:
    """Rows of ``features`` belong to ``record_ids`` in order."""

    record_ids: tuple[str, ...]
    features: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "record_ids", tuple(self.record_ids))
        if self.features.shape[0] != len(self.record_ids):
            raise DataError(f"{len(self.record_ids)} ids for {self.features.shape[0]} feature rows")


Features = Union[FeatureBatch, torch.Tensor]


def _unpack(x: Features):
    return (x.record_ids, x.features) if isinstance(x, FeatureBatch) else (None, x)


def hint_loss(s: Features, t: Features) -> torch.Tensor:
    """Mean squared error over all B x C elements of student and teacher features."""
    s_ids, s = _unpack(s)
    t_ids, t = _unpack(t)
    if s_ids is not None and t_ids is not None and s_ids != t_ids:
        raise DataError("student and teacher rows refer to different records")
    if s.shape != t.shape:
        raise DataError(f"shape mismatch: student {tuple(s.shape)} vs teacher {tuple(t.shape)}")
    return ((s - t) ** 2).sum() / s.numel()


def hint_loss_grad(s: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Closed-form gradient of :func:`hint_loss` with respect to ``s``."""
    return 2.0 * (s - t) / s.numel()


def total_loss(ce, hint, cfg: LossConfig):
    return cfg.alpha * ce + (1.0 - cfg.alpha) * hint


class FeatureAdapter(nn.Module):
    """Maps student features to the teacher's width; identity when widths agree."""

    def __init__(self, c_student: int, c_teacher: int, kind: str = "auto", generator: Optional[torch.Generator] = None):
        super().__init__()
        kind = LossConfig(adapter=kind).resolved_adapter(c_student, c_teacher)
        self.kind = kind
        if kind == "identity":
            if c_student != c_teacher:
                raise DataError(f"identity adapter needs equal widths, got {c_student} -> {c_teacher}")
            self.proj = None
        else:
            self.proj = nn.Linear(c_student, c_teacher)
            bound = 1.0 / c_student ** 0.5
            with torch.no_grad():
                self.proj.weight.uniform_(-bound, bound, generator=generator)
                self.proj.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return s if self.proj is None else self.proj(s)


def adapt_features(s: Features, adapter: FeatureAdapter) -> Features:
    ids, feats = _unpack(s)
    out = adapter(feats)
    return FeatureBatch(ids, out) if ids is not None else out


def apply_freeze_policy(model: nn.Module, p: FreezePolicy) -> nn.Module:
    """Leave only the last ``n`` feature blocks (and optionally the head) trainable.

    ``model`` must expose ``blocks`` (ordered) and ``head``. Frozen blocks are
    switched to eval mode so normalisation statistics stay fixed too.
    """
    blocks = list(model.blocks)
    n = p.n_trainable_feature_blocks
    if not 0 <= n <= len(blocks):
        raise ConfigError(f"freeze policy wants {n} trainable blocks but model has {len(blocks)}")
    for param in model.parameters():
        param.requires_grad_(False)
    for b in blocks[len(blocks) - n:]:
        for param in b.parameters():
            param.requires_grad_(True)
    for param in model.head.parameters():
        param.requires_grad_(p.head_trainable)
    model.frozen_blocks = tuple(range(len(blocks) - n))
    return model


def set_train_mode(model: nn.Module) -> None:
    model.train()
    for i in getattr(model, "frozen_blocks", ()):
        model.blocks[i].eval()


def frozen_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.named_parameters() if not v.requires_grad}


def teacher_embed(
    m: DatasetManifest,
    teacher: Encoder,
    cache: Optional[EmbeddingCache] = None,
    cfg: Optional[AugmentConfig] = None,
    normalize: bool = False,
) -> dict[str, np.ndarray]:
    """Clean-view teacher embedding for every TRAIN record of ``m``."""
    records = [r for r in m.records if m.split_of(r.record_id) is Split.TRAIN]
    if not records:
        return {}
    vecs = encode_records(records, teacher, cache, cfg)
    if normalize:
        vecs = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
    return {r.record_id: v for r, v in zip(records, vecs)}


def teacher_matrix(embeddings: dict[str, np.ndarray], record_ids: Sequence[str]) -> FeatureBatch:
    try:
        rows = np.stack([embeddings[r] for r in record_ids])
    except KeyError as e:
        raise DataError(f"no teacher embedding for record {e.args[0]!r}") from None
    return FeatureBatch(tuple(record_ids), torch.from_numpy(rows.astype(np.float32)))
