"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the lines are
repeated in the terminal summary. Criterion 7 runs the pinned desk-scale
protocol from scratch (synthetic data, backbone pretraining, 8 fractions x 3
seeds x 2 variants) and takes a few minutes.
"""
import csv
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch
from PIL import Image

from shiftkd.augment import AugmentConfig, mixres, sample_policy
from shiftkd.core import Domain, SeededRng, Split, build_manifest, save_manifest
from shiftkd.distill import FeatureAdapter, FreezePolicy, LossConfig, hint_loss, total_loss
from shiftkd.harness.config import ModelConfig, TrainConfig
from shiftkd.harness.desk import DESK_SEEDS, run_desk_protocol
from shiftkd.harness.models import ConvStudent
from shiftkd.harness.sweep import CURVE_NAME, read_table, render_curve
from shiftkd.harness.train import train, train_linear_probe
from shiftkd.harness.evaluate import evaluate_embeddings
from shiftkd.mix import MixSpec, resolve_mix, write_mix_stats
from shiftkd.split import ClusterConfig, EmbeddingBatch, split_target_clustered, straddling_clusters

from conftest import ACCEPTANCE_LINES, make_record


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_c1_mix_table(tmp_path):
    expected = {0.0: (0, 18573), 0.01: (187, 18760), 0.05: (977, 19550), 0.10: (2063, 20636),
                0.20: (4643, 23216), 0.25: (6191, 24764), 0.33: (9147, 27720), 0.50: (10100, 20200)}
    t0 = time.perf_counter()
    rows = [(f, resolve_mix(MixSpec(f, 18573, 10100))) for f in expected]
    write_mix_stats(rows, tmp_path / "mix_stats.csv")
    elapsed = time.perf_counter() - t0
    with open(tmp_path / "mix_stats.csv", newline="") as fh:
        got = {float(r["target_mix_pct"]) / 100: (int(r["target_contribution"]), int(r["total_size"]))
               for r in csv.DictReader(fh)}
    bad = {f: got[round(f * 100) / 100] for f in expected if got[round(f * 100) / 100] != expected[f]}
    report(1, not bad and elapsed < 1.0, f"8 rows match (target, total); mismatches={bad}; {elapsed * 1e3:.1f} ms")


# 2 ---------------------------------------------------------------------------

def brute_hint(s, t):
    d = (s.astype(np.float64) - t.astype(np.float64)).ravel()
    return math.fsum((d * d).tolist()) / d.size


def test_c2_loss_oracle():
    g = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        b, c = int(g.integers(1, 65)), int(g.integers(1, 1025))
        s = g.normal(size=(b, c)).astype(np.float32)
        t = g.normal(size=(b, c)).astype(np.float32)
        h = hint_loss(torch.from_numpy(s), torch.from_numpy(t)).item()
        ref = brute_hint(s, t)
        alpha, ce = float(g.random()), float(g.random() * 5)
        tot = float(total_loss(ce, h, LossConfig(alpha=alpha)))
        ref_tot = float(Fraction(alpha) * Fraction(ce) + (1 - Fraction(alpha)) * Fraction(ref))
        worst = max(worst, abs(h - ref) / ref, abs(tot - ref_tot) / ref_tot)
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-6 and elapsed < 10, f"max rel err {worst:.2e} over 1000 instances; {elapsed:.1f} s")


# 3 ---------------------------------------------------------------------------

def test_c3_gradient_check():
    g = torch.Generator().manual_seed(3)
    worst = 0.0
    eps = 1e-6
    for _ in range(100):
        b, cs, ct = (int(x) for x in torch.randint(1, 7, (3,), generator=g))
        adapter = FeatureAdapter(cs, cs + ct, "linear", g).double()
        s = torch.randn(b, cs, dtype=torch.float64, generator=g, requires_grad=True)
        t = torch.randn(b, cs + ct, dtype=torch.float64, generator=g)
        hint_loss(adapter(s), t).backward()
        params = [s, adapter.proj.weight, adapter.proj.bias]
        analytic = torch.cat([p.grad.ravel() for p in params])
        numeric = []
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + eps
                    up = hint_loss(adapter(s), t).item()
                    flat[i] = old - eps
                    down = hint_loss(adapter(s), t).item()
                    flat[i] = old
                    numeric.append((up - down) / (2 * eps))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        worst = max(worst, ((analytic - numeric).norm() / numeric.norm()).item())
    report(3, worst < 1e-4, f"max rel err {worst:.2e} over 100 instances (student + linear adapter params)")


# 4 ---------------------------------------------------------------------------

def _clustered_class_embeddings(g, n=110, dim=32, bursts=22):
    centres = g.normal(size=(bursts, dim))
    return np.vstack([centres[i % bursts] + 0.1 * g.normal(size=dim) for i in range(n)])


def _split_once(seed):
    g = np.random.default_rng(4)
    recs, vecs = [], []
    for k in range(101):
        v = _clustered_class_embeddings(g)
        for i in range(110):
            recs.append(make_record(0, f"species {k:03d}", Domain.TARGET, record_id=f"t{k:03d}_{i:03d}"))
        vecs.append(v)
    m = build_manifest(recs)
    e = EmbeddingBatch(tuple(r.record_id for r in m.records), np.vstack(vecs))
    split, assigns = split_target_clustered(m, e, 10, ClusterConfig(k_min=5), SeededRng(seed))
    return m.with_split(split), assigns


def test_c4_split_invariants(tmp_path):
    t0 = time.perf_counter()
    m1, assigns = _split_once(17)
    m2, _ = _split_once(17)
    elapsed = time.perf_counter() - t0
    save_manifest(m1, tmp_path / "a.jsonl")
    save_manifest(m2, tmp_path / "b.jsonl")
    counts_ok = all(
        sum(m1.split_of(r) is Split.TEST for r in a.record_ids) == 10
        and sum(m1.split_of(r) is Split.TRAIN for r in a.record_ids) == 100
        for a in assigns
    )
    max_straddle = max(len(straddling_clusters(a, m1.split)) for a in assigns)
    test_ids = {r for r, s in m1.split.items() if s is Split.TEST}
    train_ids = {r for r, s in m1.split.items() if s is Split.TRAIN}
    same = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    ok = counts_ok and max_straddle <= 1 and not (test_ids & train_ids) and same and elapsed < 60
    report(4, ok, f"10/100 per class={counts_ok}, max straddling={max_straddle}, overlap={len(test_ids & train_ids)}, "
                  f"byte-identical={same}; {elapsed:.1f} s for two runs")


# 5 ---------------------------------------------------------------------------

def test_c5_augmentation_frequencies():
    cfg = AugmentConfig(mixres_sizes=(3, 6))
    img = Image.fromarray(np.random.default_rng(5).integers(0, 256, (12, 12, 3), dtype=np.uint8))
    g = SeededRng(5).generator()
    sizes = [mixres(img, Domain.SOURCE, cfg, g).size[0] for _ in range(20000)]
    p75, p150 = sizes.count(3) / 20000, sizes.count(6) / 20000
    flip = sum(sample_policy(AugmentConfig(), g).flip for _ in range(20000)) / 20000
    target_same = all(mixres(img, Domain.TARGET, cfg, g).tobytes() == img.tobytes() for _ in range(2000))
    ok = abs(p75 - 0.25) <= 0.015 and abs(p150 - 0.25) <= 0.015 and abs(flip - 0.5) <= 0.015 and target_same
    report(5, ok, f"small {p75:.4f}, large {p150:.4f}, flip {flip:.4f}, target unchanged={target_same}")


# 6 ---------------------------------------------------------------------------

def test_c6_freeze_policy(tmp_path):
    g = np.random.default_rng(6)
    recs = []
    for i in range(40):
        p = tmp_path / f"{i}.png"
        Image.fromarray(g.integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(p)
        recs.append(make_record(i, f"c{i % 4}", uri=str(p), width_px=16, height_px=16))
    m = build_manifest(recs)
    m = m.with_split({r.record_id: Split.TRAIN for r in m.records})
    cfg = TrainConfig(epochs=10, batch_size=8, learning_rate=1e-2, augment=AugmentConfig(final_size=16,
                      mixres_sizes=(5, 11)), freeze=FreezePolicy(2, True))
    torch.manual_seed(0)
    model = ConvStudent(m.n_classes)
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    res = train(cfg, m, model=model)
    frozen_delta, trainable_moved = 0.0, []
    for k, v in model.named_parameters():
        d = (v.detach() - before[k]).abs().max().item()
        if k.startswith("blocks.") and int(k.split(".")[1]) < 6:
            frozen_delta = max(frozen_delta, d)
        else:
            trainable_moved.append(d > 0)
    ok = len(res.step_log) == 50 and frozen_delta == 0.0 and all(trainable_moved)
    report(6, ok, f"{len(res.step_log)} steps, frozen max |delta| = {frozen_delta}, "
                  f"trainable tensors changed {sum(trainable_moved)}/{len(trainable_moved)}")


# 7 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    table = run_desk_protocol(out)
    elapsed = time.perf_counter() - t0
    header, rows = read_table(table)
    col = {h: i for i, h in enumerate(header)}
    acc = {(float(r[0]), h): float(r[i]) for r in rows for h, i in col.items() if h != "target_mix_pct"}
    return out, table, elapsed, acc


def test_c7a_mix_helps_target(desk):
    _, _, _, acc = desk
    a0, a33 = acc[(0.0, "student_target_top1_pct")], acc[(33.0, "student_target_top1_pct")]
    report("7a", a33 >= a0, f"seed-mean target top-1 at 33% mix {a33:.2f} vs 0% mix {a0:.2f} (no KD)")


def test_c7b_kd_helps_at_zero_mix(desk):
    _, _, _, acc = desk
    kd, plain = acc[(0.0, "student_kd_target_top1_pct")], acc[(0.0, "student_target_top1_pct")]
    report("7b", kd > plain, f"seed-mean target top-1 at 0% mix: KD {kd:.2f} vs no-KD {plain:.2f} "
                             f"({len(DESK_SEEDS)} seeds)")


def test_c7c_sweep_runtime(desk):
    _, table, elapsed, acc = desk
    n_cells = len(list((table.parent / "cells").glob("*.json")))
    report("7c", elapsed < 15 * 60 and n_cells == 8 * len(DESK_SEEDS) * 2,
           f"{n_cells} cells (data + pretraining + sweep) in {elapsed / 60:.1f} min")


def test_desk_kd_never_much_worse(desk):
    # companion property: KD within 1 point of no-KD at every mix
    _, _, _, acc = desk
    gaps = {f: acc[(f, "student_kd_target_top1_pct")] - acc[(f, "student_target_top1_pct")]
            for f, h in acc if h == "student_target_top1_pct"}
    worst = min(gaps, key=gaps.get)
    report("7 companion (KD >= no-KD - 1 pt at every mix)", gaps[worst] >= -1.0,
           f"worst gap {gaps[worst]:+.2f} pts at {worst:g}% mix; gaps "
           + ", ".join(f"{f:g}%:{g:+.2f}" for f, g in sorted(gaps.items())))


# 8 ---------------------------------------------------------------------------

def test_c8_alpha_one_degeneracy(tmp_path):
    from shiftkd.distill import teacher_embed
    from shiftkd.harness.synth import SyntheticDomainSpec, SyntheticTeacher, generate_synthetic_dataset

    spec = SyntheticDomainSpec(n_classes=3, per_class_per_domain=12, image_size=16, glyph_grid=4)
    m = generate_synthetic_dataset(spec, tmp_path)
    m = m.with_split({r.record_id: Split.TRAIN for r in m.records})
    aug = AugmentConfig(final_size=16, mixres_sizes=(5, 11))
    cfg = TrainConfig(epochs=3, batch_size=16, augment=aug, loss=LossConfig(alpha=1.0), log_param_digest=True,
                      model=ModelConfig(widths=(8, 8, 8, 8, 16, 16, 16, 16)))
    emb = teacher_embed(m, SyntheticTeacher(spec, 12), None, aug)
    kd = train(cfg, m, emb).step_log
    plain = train(cfg, m).step_log
    strip = lambda log: [(e["epoch"], e["step"], e["ce"], e["total"], e["params"]) for e in log]
    report(8, strip(kd) == strip(plain),
           f"{len(kd)} steps; ce, total and parameter digests identical (KD hint term is logged but weighted 0)")


# 9 ---------------------------------------------------------------------------

def test_c9_linear_probe():
    g = np.random.default_rng(9)
    n_classes, dim = 5, 16
    centres = g.normal(0, 4, (n_classes, dim))
    y = np.repeat(np.arange(n_classes), 40)
    x = centres[y] + 0.3 * g.normal(size=(len(y), dim))
    emb = {f"e{i}": v for i, v in enumerate(x)}
    head = train_linear_probe(emb, {f"e{i}": int(c) for i, c in enumerate(y)},
                              TrainConfig(epochs=30, batch_size=32, learning_rate=1e-2), n_classes)
    train_acc = evaluate_embeddings(head, x, y, n_classes).accuracy

    from scipy.stats import binomtest
    n_cls, n = 101, 2020
    xs = g.normal(size=(2 * n, dim))
    ys = g.permutation(np.repeat(np.arange(n_cls), 2 * n // n_cls))
    head = train_linear_probe({f"s{i}": v for i, v in enumerate(xs[:n])},
                              {f"s{i}": int(c) for i, c in enumerate(ys[:n])}, TrainConfig(epochs=5), n_cls)
    r = evaluate_embeddings(head, xs[n:], ys[n:], n_cls)
    ci = binomtest(r.correct, r.n_eval, 1 / n_cls).proportion_ci(0.95)
    ok = train_acc == 1.0 and ci.low <= 1 / n_cls <= ci.high
    report(9, ok, f"separable train acc {train_acc:.3f}; shuffled-label test acc {r.accuracy:.4f} "
                  f"(95% CI [{ci.low:.4f}, {ci.high:.4f}] vs chance {1 / n_cls:.4f})")


# 10 --------------------------------------------------------------------------

def test_c10_report_emission(desk, tmp_path):
    out, table, _, _ = desk
    header, rows = read_table(table)
    shaped = header[0] == "target_mix_pct" and len(rows) == 8 and all(len(r) == len(header) for r in rows)
    render_curve(table, tmp_path / "again.png")
    stable = (tmp_path / "again.png").read_bytes() == (table.parent / CURVE_NAME).read_bytes()
    is_png = (tmp_path / "again.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    report(10, shaped and stable and is_png, f"table {len(rows)} rows x {len(header)} cols; "
                                             f"curve regenerated from table bit-identical={stable}")
