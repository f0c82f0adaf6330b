"""The pinned desk-scale protocol: synthetic data, splits, pretrained backbone, teacher, config.

Everything here is fixed up front; the acceptance suite and
``scripts/run_desk_sweep.py`` both call into it so they measure the same thing.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional

import torch

from ..augment import AugmentConfig
from ..core import (ConfigError, DatasetManifest, Domain, SeededRng, Split, filter_records, load_manifest,
                    save_manifest)
from ..distill import FreezePolicy, LossConfig
from ..encoders import CachedOnlyEncoder, PixelEncoder, TorchvisionEncoder
from ..split import ClusterConfig, embed_images, split_source_random, split_target_clustered
from .config import ModelConfig, TeacherConfig, TrainConfig
from .synth import SyntheticDomainSpec, SyntheticTeacher, generate_synthetic_dataset, load_spec, save_spec
from .train import train

DESK_SPEC = SyntheticDomainSpec(n_classes=5, per_class_per_domain=100, offset_jitter=3, seed=0)
# generic corpus for the backbone: unrelated glyphs drawn with both domains' nuisances
PRETRAIN_SPEC = replace(DESK_SPEC, n_classes=20, per_class_per_domain=60, seed=999)
DESK_N_TEST = 20
DESK_SEEDS = (0, 1, 2)
# MixRes sides scaled by 32/224 from 75 and 150 px
DESK_AUGMENT = AugmentConfig(final_size=32, mixres_sizes=(11, 21))


def desk_train_config(seed: int = 0, init: Optional[str] = None, spec_path: Optional[str] = None,
                      teacher: bool = False) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        augment=replace(DESK_AUGMENT),
        loss=LossConfig(alpha=0.5),
        freeze=FreezePolicy(n_trainable_feature_blocks=2, head_trainable=True),
        model=ModelConfig(kind="conv", init=init),
        teacher=TeacherConfig(kind="synthetic" if teacher else "none", embed_dim=32, spec_path=spec_path),
    )


def split_dataset(m: DatasetManifest, n_test: int, seed: int, cfg: Optional[AugmentConfig] = None,
                  cluster: Optional[ClusterConfig] = None, encoder=None) -> DatasetManifest:
    """Cluster-aware target split plus random source split."""
    targets = filter_records(m, lambda r: r.domain is Domain.TARGET)
    emb = embed_images(targets, encoder or PixelEncoder(8), None, cfg or DESK_AUGMENT)
    sp_t, _ = split_target_clustered(m, emb, n_test, cluster or ClusterConfig(), SeededRng(seed))
    sp_s = split_source_random(m, n_test, SeededRng(seed))
    return m.with_split({**sp_t, **sp_s})


def prepare_desk_data(root, spec: SyntheticDomainSpec = DESK_SPEC, n_test: int = DESK_N_TEST) -> DatasetManifest:
    """Generate and split the desk dataset once; later calls reload it."""
    root = Path(root)
    path = root / "manifest.jsonl"
    if path.exists():
        return load_manifest(path)
    m = split_dataset(generate_synthetic_dataset(spec, root), n_test, spec.seed)
    save_spec(spec, root / "spec.json")
    save_manifest(m, path)
    return m


def pretrain_backbone(root, spec: SyntheticDomainSpec = PRETRAIN_SPEC, epochs: int = 10, seed: int = 0) -> Path:
    """Train every block on a generic glyph corpus and save the ``blocks`` state dict."""
    root = Path(root)
    out = root / "backbone.pt"
    if out.exists():
        return out
    m = generate_synthetic_dataset(spec, root)
    m = m.with_split({r.record_id: Split.TRAIN for r in m.records})
    cfg = replace(desk_train_config(seed), epochs=epochs, freeze=FreezePolicy(n_trainable_feature_blocks=8))
    result = train(cfg, m)
    torch.save(result.model.blocks.state_dict(), out)
    return out


def build_teacher(cfg: TeacherConfig):
    if cfg.kind == "none":
        return None
    if cfg.kind == "synthetic":
        if not cfg.spec_path:
            raise ConfigError("teacher.kind=synthetic needs teacher.spec_path")
        return SyntheticTeacher(load_spec(cfg.spec_path), cfg.embed_dim, cfg.seed)
    if cfg.kind == "torchvision":
        return TorchvisionEncoder(cfg.arch, cfg.weights)
    if not cfg.fingerprint:
        raise ConfigError("teacher.kind=cache needs teacher.fingerprint")
    return CachedOnlyEncoder(cfg.fingerprint)


def run_desk_protocol(out_dir, fractions=None, seeds=DESK_SEEDS, variants=("student", "student_kd"),
                      pretrain_epochs: int = 10) -> Path:
    """Data -> backbone -> teacher -> mix sweep; returns the results table path. Resumable."""
    from ..mix import STANDARD_FRACTIONS
    from .sweep import run_sweep

    out_dir = Path(out_dir)
    base = prepare_desk_data(out_dir / "data")
    backbone = pretrain_backbone(out_dir / "pretrain", epochs=pretrain_epochs)
    needs_teacher = any(v != "student" for v in variants)
    cfg = desk_train_config(init=str(backbone), spec_path=str(out_dir / "data" / "spec.json"), teacher=needs_teacher)
    return run_sweep(STANDARD_FRACTIONS if fractions is None else fractions, base, cfg, out_dir / "sweep",
                     seeds, variants, build_teacher(cfg.teacher))
