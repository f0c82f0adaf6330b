"""Command-line entry point: ``shiftkd <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .core import ConfigError, DataError, Domain, NumericError, SeededRng, load_manifest, merge_manifests, save_manifest

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("shiftkd")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _cache(args):
    from .cache import EmbeddingCache

    return EmbeddingCache(args.cache) if getattr(args, "cache", None) else EmbeddingCache()


# -- ingest ---------------------------------------------------------------

def cmd_ingest_source(args):
    from .ingest import FixtureClient, GbifClient, QuotaPlan, SpeciesQuery, enforce_quota, fetch_source_class, read_species_list
    from .core import build_manifest

    client = FixtureClient(args.fixture) if args.fixture else GbifClient(requests_per_sec=args.requests_per_sec)
    media = Path(args.media_dir or Path(args.out).parent / "media")
    records, short = [], {}
    for key, name in read_species_list(args.species_list):
        res = fetch_source_class(SpeciesQuery(key, name, args.max_per_class), client, media / key,
                                 parallelism=args.parallelism)
        records += res.records
        if res.shortfall:
            short[name] = res.shortfall
    if args.no_quota:
        m = build_manifest(records, f"ingest source max={args.max_per_class}")
    else:
        plan = QuotaPlan(per_class_source_train=args.quota_train, per_class_source_test=args.quota_test)
        m = enforce_quota(records, plan, SeededRng(args.seed), (Domain.SOURCE,))
    save_manifest(m, args.out)
    print(f"{len(m)} source records, {m.n_classes} classes -> {args.out}")
    for name, n in sorted(short.items()):
        print(f"shortfall: {name} missing {n}", file=sys.stderr)


def cmd_ingest_target(args):
    from .core import build_manifest
    from .ingest import QuotaPlan, enforce_quota, register_target_crops

    scan = register_target_crops(args.root)
    for w in scan.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.no_quota:
        m = build_manifest(scan.records, f"ingest target root={args.root}")
    else:
        plan = QuotaPlan(per_class_target_total=args.quota_total, per_class_target_test=args.quota_test)
        m = enforce_quota(scan.records, plan, SeededRng(args.seed), (Domain.TARGET,))
    save_manifest(m, args.out)
    print(f"{len(m)} target records, {m.n_classes} classes -> {args.out}")


# -- split / mix ----------------------------------------------------------

def cmd_split_target(args):
    from .augment import AugmentConfig
    from .core import filter_records
    from .encoders import PixelEncoder, TorchvisionEncoder
    from .split import ClusterConfig, embed_images, split_target_clustered, straddling_clusters

    m = load_manifest(args.manifest)
    if args.encoder == "pixel":
        enc, aug = PixelEncoder(8), AugmentConfig(final_size=args.image_size or 32)
    else:
        enc, aug = TorchvisionEncoder(args.encoder, args.weights), AugmentConfig(final_size=args.image_size or 224)
    emb = embed_images(filter_records(m, lambda r: r.domain is Domain.TARGET), enc, _cache(args), aug)
    split, assigns = split_target_clustered(m, emb, args.n_test, ClusterConfig(k_min=args.k_min, linkage=args.linkage),
                                            SeededRng(args.seed))
    out = replace(m.with_split(split), provenance=f"{m.provenance}; split target seed={args.seed} encoder={enc.fingerprint}",
                  seed=args.seed)
    save_manifest(out, args.out)
    straddle = sum(len(straddling_clusters(a, split)) for a in assigns)
    print(f"target split: {sum(v.value == 'TEST' for v in split.values())} TEST, "
          f"{sum(v.value == 'TRAIN' for v in split.values())} TRAIN, {straddle} straddling clusters")


def cmd_split_source(args):
    from .split import split_source_random

    m = load_manifest(args.manifest)
    split = split_source_random(m, args.n_test, SeededRng(args.seed))
    save_manifest(replace(m.with_split(split), seed=args.seed), args.out)
    print(f"source split: {sum(v.value == 'TEST' for v in split.values())} TEST of {len(split)}")


def cmd_merge(args):
    m = merge_manifests([load_manifest(p) for p in args.manifests], "merged")
    save_manifest(m, args.out)
    print(f"{len(m)} records -> {args.out}")


def cmd_mix(args):
    from .mix import write_mix_suite

    m = load_manifest(args.manifest)
    paths = write_mix_suite(_floats(args.fractions), m, SeededRng(args.seed), args.out_dir)
    print((Path(args.out_dir) / "mix_stats.csv").read_text(), end="")
    print(f"{len(paths)} manifests -> {args.out_dir}")


# -- augment preview ------------------------------------------------------

def cmd_augment_preview(args):
    from .augment import mixres, apply_policy
    from .encoders import load_image
    from .harness.config import load_config, TrainConfig

    cfg = load_config(args.config).augment if args.config else TrainConfig().augment
    m = load_manifest(args.manifest)
    rec = next((r for r in m.records if r.record_id == args.record), None)
    if rec is None:
        raise DataError(f"record {args.record!r} not in manifest")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = load_image(rec.uri)
    g = SeededRng(args.seed).child("aug", 0, rec.record_id).generator()
    after = apply_policy(mixres(img, rec.domain, cfg, g), cfg, g)
    img.save(out / "before.png")
    after.save(out / "after.png")
    print(f"wrote {out / 'before.png'} and {out / 'after.png'}")


# -- synthetic / training -------------------------------------------------

def cmd_synth(args):
    from .harness.desk import DESK_SPEC, prepare_desk_data

    spec = replace(DESK_SPEC, n_classes=args.n_classes, per_class_per_domain=args.per_class, seed=args.seed,
                   image_size=args.image_size)
    m = prepare_desk_data(args.out_dir, spec, args.n_test)
    print(f"{len(m)} records, {m.n_classes} classes -> {Path(args.out_dir) / 'manifest.jsonl'}")


def cmd_pretrain(args):
    from .harness.desk import pretrain_backbone

    print(pretrain_backbone(args.out_dir, epochs=args.epochs))


def _load_cfg(args):
    from .harness.config import load_config

    return load_config(args.config)


def cmd_train(args):
    from .distill import teacher_embed
    from .harness.desk import build_teacher
    from .harness.train import train

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    teacher = build_teacher(cfg.teacher)
    t_emb = teacher_embed(m, teacher, _cache(args), cfg.augment, cfg.loss.normalize_embeddings) if teacher else None
    out = Path(args.out_dir)
    result = train(cfg, m, t_emb, checkpoint_dir=out / "checkpoints")
    torch.save({"kind": "student", "state_dict": result.model.state_dict(), "n_classes": m.n_classes,
                "class_table": list(m.class_table), "config": cfg.to_dict()}, out / "model.pt")
    with open(out / "step_log.jsonl", "w", encoding="utf-8") as fh:
        for e in result.step_log:
            fh.write(json.dumps(e) + "\n")
    print(f"trained {len(result.step_log)} steps -> {out / 'model.pt'}")


def cmd_probe(args):
    from .core import Split
    from .distill import teacher_embed
    from .harness.desk import build_teacher
    from .harness.train import train_linear_probe

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    teacher = build_teacher(cfg.teacher)
    if teacher is None:
        raise ConfigError("probe needs a teacher encoder (teacher.kind)")
    emb = teacher_embed(m, teacher, _cache(args), cfg.augment)
    labels = {r.record_id: r.class_id for r in m.records if m.split_of(r.record_id) is Split.TRAIN}
    head = train_linear_probe(emb, labels, cfg, m.n_classes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "probe", "state_dict": head.state_dict(), "n_classes": m.n_classes,
                "class_table": list(m.class_table), "config": cfg.to_dict()}, out / "probe.pt")
    print(f"probe trained on {len(labels)} embeddings -> {out / 'probe.pt'}")


def cmd_eval(args):
    from .encoders import encode_records
    from .harness.config import TrainConfig
    from .harness.desk import build_teacher
    from .harness.evaluate import evaluate, evaluate_embeddings, held_out_records
    from .harness.models import build_student

    state = torch.load(args.checkpoint, weights_only=False)
    cfg = TrainConfig.from_dict(state["config"])
    m = load_manifest(args.manifest)
    domains = [None] if args.domain == "all" else [Domain(args.domain.upper())]
    results = {}
    for dom in domains:
        key = dom.value.lower() if dom else "all"
        if state["kind"] == "probe":
            head = torch.nn.Linear(state["state_dict"]["weight"].shape[1], state["n_classes"])
            head.load_state_dict(state["state_dict"])
            recs = held_out_records(m, dom)
            vecs = encode_records(recs, build_teacher(cfg.teacher), _cache(args), cfg.augment)
            res = evaluate_embeddings(head, vecs, [r.class_id for r in recs], m.n_classes, key)
        else:
            model = build_student(replace(cfg.model, weights=None), state["n_classes"])
            model.load_state_dict(state["state_dict"])
            res = evaluate(model, m, dom, cfg.augment)
        results[key] = res.to_dict()
        print(f"{key}: top-1 {res.accuracy:.4f} ({res.correct}/{res.n_eval})")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1), encoding="utf-8")


def cmd_sweep(args):
    from .harness.desk import build_teacher
    from .harness.sweep import run_sweep

    cfg = _load_cfg(args)
    m = load_manifest(args.manifest)
    variants = [v.strip() for v in args.variants.split(",")]
    teacher = build_teacher(cfg.teacher)
    table = run_sweep(_floats(args.fractions), m, cfg, args.out_dir, _ints(args.seeds), variants, teacher, _cache(args))
    print(Path(table).read_text(), end="")


def cmd_report(args):
    from .harness.sweep import render_curve

    render_curve(args.table, args.out)
    print(f"curve -> {args.out}")


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="build source/target manifests").add_subparsers(dest="which", required=True)
    s = ing.add_parser("source")
    s.add_argument("--species-list", required=True)
    s.add_argument("--max-per-class", type=int, default=224)
    s.add_argument("--out", required=True)
    s.add_argument("--media-dir")
    s.add_argument("--fixture", help="recorded API fixture (JSON) instead of the live service")
    s.add_argument("--requests-per-sec", type=float, default=5.0)
    s.add_argument("--parallelism", type=int, default=4)
    s.add_argument("--quota-train", type=int, default=184)
    s.add_argument("--quota-test", type=int, default=20)
    s.add_argument("--no-quota", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ingest_source)
    t = ing.add_parser("target")
    t.add_argument("--root", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quota-total", type=int, default=110)
    t.add_argument("--quota-test", type=int, default=10)
    t.add_argument("--no-quota", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_ingest_target)

    sp = sub.add_parser("split", help="assign TRAIN/TEST").add_subparsers(dest="which", required=True)
    st = sp.add_parser("target")
    st.add_argument("--manifest", required=True)
    st.add_argument("--n-test", type=int, default=10)
    st.add_argument("--k-min", type=int, default=5)
    st.add_argument("--linkage", default="average", choices=["average", "complete", "single"])
    st.add_argument("--encoder", default="resnet50", help="'pixel' or a torchvision architecture name")
    st.add_argument("--weights", default="IMAGENET1K_V1")
    st.add_argument("--image-size", type=int)
    st.add_argument("--cache")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_split_target)
    ss = sp.add_parser("source")
    ss.add_argument("--manifest", required=True)
    ss.add_argument("--n-test", type=int, default=20)
    ss.add_argument("--seed", type=int, default=0)
    ss.add_argument("--out", required=True)
    ss.set_defaults(func=cmd_split_source)

    mg = sub.add_parser("merge", help="concatenate manifests")
    mg.add_argument("manifests", nargs="+")
    mg.add_argument("--out", required=True)
    mg.set_defaults(func=cmd_merge)

    mx = sub.add_parser("mix", help="build domain-mixed training manifests")
    mx.add_argument("--manifest", required=True)
    mx.add_argument("--fractions", default="0,0.01,0.05,0.1,0.2,0.25,0.33,0.5")
    mx.add_argument("--seed", type=int, default=0)
    mx.add_argument("--out-dir", required=True)
    mx.set_defaults(func=cmd_mix)

    au = sub.add_parser("augment").add_subparsers(dest="which", required=True)
    pv = au.add_parser("preview", help="write before/after images of one record")
    pv.add_argument("--manifest", required=True)
    pv.add_argument("--record", required=True)
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--config")
    pv.add_argument("--out-dir", required=True)
    pv.set_defaults(func=cmd_augment_preview)

    sy = sub.add_parser("synth", help="generate and split the synthetic two-domain dataset")
    sy.add_argument("--out-dir", required=True)
    sy.add_argument("--n-classes", type=int, default=5)
    sy.add_argument("--per-class", type=int, default=100)
    sy.add_argument("--image-size", type=int, default=32)
    sy.add_argument("--n-test", type=int, default=20)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(func=cmd_synth)

    pt = sub.add_parser("pretrain", help="pretrain the desk-scale backbone on a generic glyph corpus")
    pt.add_argument("--out-dir", required=True)
    pt.add_argument("--epochs", type=int, default=10)
    pt.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("train", cmd_train, "train a student"), ("probe", cmd_probe, "linear probe on a frozen teacher")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True)
        c.add_argument("--manifest", required=True)
        c.add_argument("--out-dir", required=True)
        c.add_argument("--cache")
        c.set_defaults(func=func)

    ev = sub.add_parser("eval", help="top-1 accuracy on TEST records")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--domain", default="all", choices=["target", "source", "all"])
    ev.add_argument("--cache")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="train/eval over mix fractions and emit the table and curve")
    sw.add_argument("--config", required=True)
    sw.add_argument("--manifest", required=True)
    sw.add_argument("--fractions", default="0,0.01,0.05,0.1,0.2,0.25,0.33,0.5")
    sw.add_argument("--seeds", default="0")
    sw.add_argument("--variants", default="student,student_kd")
    sw.add_argument("--cache")
    sw.add_argument("--out-dir", required=True)
    sw.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="render the accuracy-vs-mix curve from a results table")
    rp.add_argument("--table", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
