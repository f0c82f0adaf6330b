"""Training loops: student (CE or CE + feature hint) and linear probe on frozen embeddings."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..augment import normalize, train_transform
from ..core import DataError, DatasetManifest, NumericError, SeededRng, Split, stable_int
from ..distill import (FeatureAdapter, apply_freeze_policy, hint_loss, set_train_mode, teacher_matrix,
                       total_loss)
from ..encoders import load_image
from .config import TrainConfig
from .models import build_student

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: nn.Module
    adapter: Optional[FeatureAdapter]
    step_log: list[dict] = field(default_factory=list)


def _torch_generator(*keys) -> torch.Generator:
    return torch.Generator().manual_seed(stable_int(*keys) & 0x7FFFFFFFFFFFFFFF)


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()[:16]


def _latest_checkpoint(d: Optional[Path]) -> Optional[Path]:
    if d is None or not d.exists():
        return None
    found = sorted(d.glob("epoch_*.pt"))
    return found[-1] if found else None


def train(
    cfg: TrainConfig,
    train_manifest: DatasetManifest,
    teacher_embeddings: Optional[Mapping[str, np.ndarray]] = None,
    model: Optional[nn.Module] = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Fit a student; with ``teacher_embeddings`` the loss is alpha*CE + (1-alpha)*hint."""
    records = list(train_manifest.records)
    if not records:
        raise DataError("training manifest is empty")
    stray = [r.record_id for r in records if train_manifest.split_of(r.record_id) is not Split.TRAIN]
    if stray:
        raise DataError(f"training manifest holds non-TRAIN records, e.g. {stray[0]}")

    torch.manual_seed(cfg.seed & 0x7FFFFFFFFFFFFFFF)
    if model is None:
        model = build_student(cfg.model, train_manifest.n_classes)
        if cfg.model.init:
            model.blocks.load_state_dict(torch.load(cfg.model.init, weights_only=True))
    apply_freeze_policy(model, cfg.freeze)

    adapter = None
    if teacher_embeddings is not None:
        c_t = len(next(iter(teacher_embeddings.values())))
        adapter = FeatureAdapter(model.feature_dim, c_t, cfg.loss.adapter, _torch_generator(cfg.seed, "adapter"))
    params = [p for p in model.parameters() if p.requires_grad]
    if adapter is not None:
        params += list(adapter.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    images = {r.record_id: load_image(r.uri) for r in records}
    labels = torch.tensor([r.class_id for r in records])
    root = SeededRng(cfg.seed)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    step_log: list[dict] = []
    start_epoch = 0
    latest = _latest_checkpoint(ckpt_dir)
    if latest is not None:
        state = torch.load(latest, weights_only=False)
        model.load_state_dict(state["model"])
        if adapter is not None:
            adapter.load_state_dict(state["adapter"])
        opt.load_state_dict(state["optimizer"])
        step_log = state["step_log"]
        start_epoch = state["epoch"] + 1
        log.info("resumed from %s", latest)

    n, bs = len(records), cfg.batch_size
    step = len(step_log)
    for epoch in range(start_epoch, cfg.epochs):
        order = root.child("order", epoch).generator().permutation(n)
        for b in range(math.ceil(n / bs)):
            idx = order[b * bs:(b + 1) * bs]
            batch = [records[int(i)] for i in idx]
            x = torch.from_numpy(np.stack([
                normalize(train_transform(images[r.record_id], r.domain, cfg.augment,
                                          root.child("aug", epoch, r.record_id).generator()), cfg.augment)
                for r in batch
            ]))
            y = labels[torch.from_numpy(idx)]

            set_train_mode(model)
            logits, feats = model.forward_with_features(x)
            ce = F.cross_entropy(logits, y)
            if adapter is not None:
                t = teacher_matrix(teacher_embeddings, [r.record_id for r in batch])
                hint = hint_loss(adapter(feats), t.features)
                loss = total_loss(ce, hint, cfg.loss)
            else:
                hint = torch.zeros(())
                loss = ce
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step} (ce={ce.item()}, hint={hint.item()})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            entry = {"epoch": epoch, "step": step, "ce": ce.item(), "hint": hint.item(), "total": loss.item()}
            if cfg.log_param_digest:
                entry["params"] = param_digest(model)
            step_log.append(entry)
            step += 1
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            torch.save({"model": model.state_dict(),
                        "adapter": adapter.state_dict() if adapter is not None else None,
                        "optimizer": opt.state_dict(), "step_log": step_log, "epoch": epoch},
                       ckpt_dir / f"epoch_{epoch:04d}.pt")
    model.eval()
    return TrainResult(model, adapter, step_log)


def train_linear_probe(
    embeddings: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    cfg: TrainConfig,
    n_classes: int,
) -> nn.Linear:
    """Single linear layer on frozen encoder outputs, trained with CE and AdamW."""
    ids = sorted(labels)
    missing = [i for i in ids if i not in embeddings]
    if missing:
        raise DataError(f"no embedding for record {missing[0]!r}")
    dims = {len(embeddings[i]) for i in ids}
    if len(dims) != 1:
        raise DataError(f"embeddings have mixed dimensions {sorted(dims)}")
    X = torch.as_tensor(np.stack([embeddings[i] for i in ids]), dtype=torch.float32)
    y = torch.tensor([labels[i] for i in ids])

    head = nn.Linear(X.shape[1], n_classes)
    g = _torch_generator(cfg.seed, "probe-init")
    bound = 1.0 / X.shape[1] ** 0.5
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=g)
        head.bias.uniform_(-bound, bound, generator=g)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    root = SeededRng(cfg.seed)
    n, bs = len(ids), cfg.batch_size
    head.train()
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(root.child("probe-order", epoch).generator().permutation(n))
        for b in range(math.ceil(n / bs)):
            idx = order[b * bs:(b + 1) * bs]
            loss = F.cross_entropy(head(X[idx]), y[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite probe loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    head.eval()
    return head
