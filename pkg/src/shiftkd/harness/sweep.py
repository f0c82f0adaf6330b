"""Mix-fraction sweep with per-cell resume markers, plus the results table and curve."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..cache import EmbeddingCache
from ..core import ConfigError, DatasetManifest, Domain, SeededRng, Split, save_manifest
from ..distill import teacher_embed
from ..encoders import Encoder, encode_records
from ..mix import build_mix_suite, mix_filename
from .config import TrainConfig
from .evaluate import EvalResult, evaluate, evaluate_embeddings, held_out_records
from .train import train, train_linear_probe

log = logging.getLogger(__name__)

VARIANTS = ("student", "student_kd", "teacher_probe")
TABLE_NAME = "results_table.csv"
CURVE_NAME = "accuracy_vs_mix.png"


def cell_name(variant: str, fraction: float, seed: int) -> str:
    return f"{variant}__f{float(fraction) * 100:05.1f}__s{seed}.json"


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def run_cell(variant: str, fraction: float, seed: int, train_m: DatasetManifest, base: DatasetManifest,
             cfg: TrainConfig, teacher_embeddings=None, teacher_test=None) -> dict:
    cfg = replace(cfg, seed=seed)
    meta = dict(variant=variant, fraction=fraction, seed=seed)
    out = {**meta, "n_train": len(train_m)}
    if variant == "teacher_probe":
        labels = {r.record_id: r.class_id for r in train_m.records}
        head = train_linear_probe(teacher_embeddings, labels, cfg, base.n_classes)
        for dom in (Domain.TARGET, Domain.SOURCE):
            recs = held_out_records(base, dom)
            vecs = np.stack([teacher_test[r.record_id] for r in recs])
            res = evaluate_embeddings(head, vecs, [r.class_id for r in recs], base.n_classes, dom.value, **meta)
            out[dom.value.lower()] = res.to_dict()
        return out
    kd = variant == "student_kd"
    result = train(cfg, train_m, teacher_embeddings if kd else None)
    for dom in (Domain.TARGET, Domain.SOURCE):
        out[dom.value.lower()] = evaluate(result.model, base, dom, cfg.augment, **meta).to_dict()
    out["final_step"] = result.step_log[-1] if result.step_log else None
    return out


def run_sweep(
    fractions: Sequence[float],
    base: DatasetManifest,
    cfg: TrainConfig,
    out_dir,
    seeds: Sequence[int] = (0,),
    variants: Sequence[str] = ("student", "student_kd"),
    teacher: Optional[Encoder] = None,
    cache: Optional[EmbeddingCache] = None,
) -> Path:
    """Train and evaluate every (fraction, variant, seed) cell; completed cells are skipped."""
    out_dir = Path(out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    bad = set(variants) - set(VARIANTS)
    if bad:
        raise ConfigError(f"unknown variants {sorted(bad)}")
    needs_teacher = any(v in ("student_kd", "teacher_probe") for v in variants)
    if needs_teacher and teacher is None:
        raise ConfigError("student_kd / teacher_probe variants need a teacher")

    t_train = teacher_embed(base, teacher, cache, cfg.augment, cfg.loss.normalize_embeddings) if needs_teacher else None
    t_test = None
    if "teacher_probe" in variants:
        recs = held_out_records(base, None)
        t_test = dict(zip((r.record_id for r in recs), encode_records(recs, teacher, cache, cfg.augment)))

    for seed in seeds:
        pending = [(f, v) for f in fractions for v in variants if not (cells_dir / cell_name(v, f, seed)).exists()]
        if not pending:
            continue
        suite = dict(zip(fractions, build_mix_suite(fractions, base, SeededRng(seed))))
        for f, m in suite.items():
            save_manifest(m, out_dir / "mixes" / f"seed{seed}" / mix_filename(f))
        for f, v in pending:
            log.info("cell variant=%s fraction=%s seed=%s", v, f, seed)
            res = run_cell(v, f, seed, suite[f], base, cfg, t_train, t_test)
            _write_json_atomic(cells_dir / cell_name(v, f, seed), res)

    table = out_dir / TABLE_NAME
    write_table(collect_cells(cells_dir, fractions, variants, seeds), table, fractions, variants)
    render_curve(table, out_dir / CURVE_NAME)
    return table


def collect_cells(cells_dir, fractions, variants, seeds) -> dict:
    cells = {}
    for f in fractions:
        for v in variants:
            for s in seeds:
                p = Path(cells_dir) / cell_name(v, f, s)
                if p.exists():
                    cells[(float(f), v, s)] = json.loads(p.read_text(encoding="utf-8"))
    return cells


def table_columns(variants: Sequence[str]) -> list[str]:
    cols = ["target_mix_pct"]
    for v in variants:
        cols += [f"{v}_target_top1_pct", f"{v}_source_top1_pct"]
    return cols


def write_table(cells: dict, path, fractions: Sequence[float], variants: Sequence[str]) -> None:
    """Rows are mix fractions; each variant contributes target and source top-1 (seed mean, %)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(table_columns(variants))
        for f in fractions:
            row = [f"{float(f) * 100:g}"]
            for v in variants:
                for dom in ("target", "source"):
                    accs = [c[dom]["accuracy"] for (cf, cv, _), c in sorted(cells.items())
                            if cf == float(f) and cv == v]
                    row.append(f"{100 * np.mean(accs):.2f}" if accs else "")
            w.writerow(row)


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def render_curve(table_path, out_path) -> None:
    """Target (solid) and source (dashed) top-1 vs mix; depends on the table file alone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = read_table(table_path)
    x = [float(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for j in range(1, len(header), 2):
        name = header[j].removesuffix("_target_top1_pct")
        for col, style in ((j, "-o"), (j + 1, "--x")):
            ys = [float(r[col]) if r[col] else np.nan for r in rows]
            label = f"{name} ({'target' if col == j else 'source'})"
            ax.plot(x, ys, style, label=label, markersize=4)
    ax.set_xlabel("target-domain mix (%)")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="png", metadata={"Software": None})
    plt.close(fig)
