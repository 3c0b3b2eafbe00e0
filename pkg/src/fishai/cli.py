"""Command-line entry point: ``fishai <command> [options]``.

Data goes to files in the workspace, the human summary to stdout and all
diagnostics to stderr. Exit status is 0 on success, 1 on a pipeline error
and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import augmentor, dataset, evaluator, promptgen, trainer
from .dataset import DatasetManifest, SizeBin
from .errors import FishAIError, MissingDescription
from .model import (
    classify,
    embed_sample,
    embed_texts,
    load_checkpoint,
    preprocess_image,
)
from .pipeline import (
    PipelineConfig,
    Workspace,
    augment_manifest,
    describe_level,
    fewshot,
    image_backend_for,
    stamp,
)
from .taxonomy import TaxonomicLevel

log = logging.getLogger("fishai")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_overrides(seed=args.seed, workspace=args.workspace)
    train_over = {}
    for name in ("batch_size", "base_lr", "warmup_epochs", "epochs", "lr_decay", "weight_decay",
                 "decay_period_epochs", "checkpoint_every", "tau"):
        value = getattr(args, name, None)
        if value is not None:
            train_over[name] = value
    if getattr(args, "level", None) and args.command in ("train", "fewshot"):
        train_over["level"] = args.level
    if getattr(args, "no_fine_tune", False):
        train_over["fine_tune"] = False
    if args.seed is not None:
        train_over["seed"] = args.seed
    if train_over:
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    if getattr(args, "target", None) is not None:
        cfg = replace(cfg, augment=replace(cfg.augment, target=args.target))
    if getattr(args, "backend", None):
        cfg = replace(cfg, augment=replace(cfg.augment, backend_id=args.backend))
    if getattr(args, "client", None):
        cfg = replace(cfg, promptgen=replace(cfg.promptgen, client_id=args.client,
                                             model_name="mock" if args.client.startswith("mock") else
                                             cfg.promptgen.model_name))
    return cfg


def _manifest(ws: Workspace, name: str) -> DatasetManifest:
    return DatasetManifest.load(ws.resolve(name) if Path(name).suffix else ws.manifest(name))


def _level(args, cfg: PipelineConfig, default: str | None = None) -> TaxonomicLevel:
    return TaxonomicLevel.parse(getattr(args, "level", None) or default or cfg.eval.level)


def _descriptions(ws: Workspace, level, cfg: PipelineConfig) -> dict[str, str]:
    return promptgen.load_descriptions(ws.description_cache(), level, cfg.promptgen.client_id)


def cmd_make_toy(args, cfg, ws):
    ws.init()
    toy = cfg.dataset.toy_config(cfg.seed)
    manifest, paths = dataset.make_toy_dataset(toy, ws.root)
    manifest = stamp(manifest, cfg.digest())
    out = ws.resolve(args.out)
    manifest.save(out)
    print(f"wrote {len(paths)} toy images for {toy.class_count} classes; manifest {out}")


def cmd_ingest(args, cfg, ws):
    ws.init()
    source, root = Path(args.source), Path(args.root)
    manifest = dataset.ingest(source, root)
    # rebase image paths onto the workspace so one root serves real and synthetic images
    rel_root = Path(_relpath(root.resolve(), ws.root.resolve()))
    records = [replace(r, path=(rel_root / r.path).as_posix()) for r in manifest.records]
    manifest = stamp(manifest.with_records(records), cfg.digest())
    out = ws.resolve(args.out)
    manifest.save(out)
    print(f"ingested {len(manifest.records)} images; manifest {out}")


def _relpath(path: Path, start: Path) -> str:
    import os

    return os.path.relpath(path, start)


def cmd_split(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    seed = cfg.seed
    result = dataset.split(manifest, args.train_fraction or cfg.dataset.train_fraction, seed)
    out = ws.resolve(args.out)
    result.save(out)
    print(f"split {len(result.records)} images: {len(result.train)} train / {len(result.test)} test (seed {seed}); "
          f"manifest {out}")


def cmd_stats(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    levels = [TaxonomicLevel.parse(args.level)] if args.level else list(manifest.levels)
    print(f"{'Hierarchy':<16}" + "".join(f"{lvl.label:>12}" for lvl in levels))
    print(f"{'# of categories':<16}" + "".join(f"{len(manifest.label_space(lvl)):>12}" for lvl in levels))
    print(f"{'# of images':<16}" + "".join(f"{len(manifest.records):>12}" for lvl in levels))
    if manifest.is_split:
        for lvl in levels:
            stats = dataset.long_tail_stats(manifest, lvl)
            hist = "  ".join(f"{b.value}: {stats.histogram[b]}" for b in SizeBin)
            print(f"{lvl.label} size bins (real train counts): {hist}  (total {sum(stats.histogram.values())})")


def cmd_describe(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    level = _level(args, cfg)
    try:
        descriptions = describe_level(ws, manifest, level, cfg.promptgen)
    except promptgen.DescribeFailures as exc:
        for f in exc.failures:
            print(f"describe failed for {f.category}: {f}", file=sys.stderr)
        raise
    print(f"{len(descriptions)} {level.label} descriptions cached in {ws.descriptions}")


def cmd_augment(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    level = _level(args, cfg, cfg.train.level)
    plan = augmentor.plan_augmentation(manifest.train_counts(level, dataset.Source.REAL), cfg.augment.target)
    planned = sum(1 for q in plan.quotas.values() if q > 0)
    print(f"augmentation plan: target {plan.target_per_class}, {planned} classes, total quota {plan.total}")
    if args.dry_run:
        for c, q in sorted(plan.quotas.items()):
            if q:
                print(f"  {c}: {q}")
        return
    descriptions = _descriptions(ws, level, cfg)
    missing = sorted(c for c, q in plan.quotas.items() if q > 0 and c not in descriptions)
    if missing:
        raise MissingDescription(missing)
    _, merged = augment_manifest(ws, manifest, level, descriptions, cfg.augment, cfg.seed,
                                 backend=image_backend_for(manifest, cfg.augment))
    merged = stamp(merged, cfg.digest())
    out = ws.resolve(args.out)
    merged.save(out)
    print(f"generated {plan.total} synthetic images; manifest {out}")


def cmd_train(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    level = TaxonomicLevel.parse(cfg.train.level)
    descriptions = _descriptions(ws, level, cfg)
    ckpt = ws.resolve(args.checkpoint)
    if args.resume:
        t = trainer.Trainer.resume(ckpt, cfg.train, manifest, descriptions, ws.root)
    else:
        t = trainer.Trainer(cfg.train, manifest, descriptions, ws.root)
    t.run(ckpt)
    last = t.log.entries[-1] if t.log.entries else None
    summary = f"final loss {last.loss:.4f}" if last else "no epochs run"
    print(f"trained {t.epoch} epochs ({summary}); checkpoint {ckpt}")


def cmd_eval(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    level = _level(args, cfg)
    report = evaluator.evaluate(ws.resolve(args.checkpoint), manifest, level, _descriptions(ws, level, cfg), ws.root)
    report = evaluator.with_extra(report, pipeline_config=cfg.digest())
    out = ws.resolve(args.out or f"reports/eval_{level.label.lower()}.json")
    report.save(out)
    print(evaluator.render_level_table({args.name: [report]}))
    print()
    print(evaluator.render_bin_table({args.name: report}))
    print(f"report {out}")


def cmd_fewshot(args, cfg, ws):
    manifest = _manifest(ws, args.manifest)
    base, aug, rows = fewshot(ws, manifest, cfg, args.k, augment=not args.no_augment)
    reports = {"baseline": [base.report]}
    if aug is not None:
        reports = {"augmented": [aug.report], "baseline": [base.report]}
    print(f"{args.k}-shot, level {cfg.train.level}")
    print(evaluator.render_level_table(reports))
    if rows is not None:
        print()
        print(evaluator.render_delta_table(rows, ("augmented", "baseline")))


def cmd_predict(args, cfg, ws):
    backend, meta = load_checkpoint(ws.resolve(args.checkpoint))
    level = TaxonomicLevel.parse(args.level or meta.get("level") or cfg.eval.level)
    categories = meta.get("categories")
    if not categories:
        raise FishAIError("checkpoint has no category list")
    descriptions = _descriptions(ws, level, cfg)
    protos = embed_texts(backend, [descriptions.get(c) or c for c in categories])
    image = preprocess_image(dataset.load_image(args.image))
    ranking = classify(embed_sample(backend, image), protos, categories)
    for rank, (name, score) in enumerate(ranking[: args.top_n], start=1):
        print(f"{rank}. {name}\t{score:.4f}")


COMMANDS = {
    "make-toy": cmd_make_toy,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "stats": cmd_stats,
    "describe": cmd_describe,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "predict": cmd_predict,
}
MUTATING = {"make-toy", "ingest", "split", "describe", "augment", "train", "eval", "fewshot"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fishai", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML pipeline config")
    parser.add_argument("--seed", type=int, help="global seed (overrides config)")
    parser.add_argument("--workspace", help="workspace directory (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write the procedural long-tailed toy dataset")
    p.add_argument("--out", default="manifests/raw.jsonl")

    p = sub.add_parser("ingest", help="build a manifest from a path,family,genus,species CSV")
    p.add_argument("source")
    p.add_argument("root", help="directory image paths are relative to")
    p.add_argument("--out", default="manifests/raw.jsonl")

    p = sub.add_parser("split", help="stratified train/test split")
    p.add_argument("--manifest", default="raw")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--out", default="manifests/split.jsonl")

    p = sub.add_parser("stats", help="category counts and size-bin histogram")
    p.add_argument("--manifest", default="split")
    p.add_argument("--level")

    p = sub.add_parser("describe", help="generate and cache class descriptions")
    p.add_argument("--manifest", default="split")
    p.add_argument("--level")
    p.add_argument("--client", help="text client id (mock-* uses the offline mock)")

    p = sub.add_parser("augment", help="generate synthetic images for minority classes")
    p.add_argument("--manifest", default="split")
    p.add_argument("--level")
    p.add_argument("--target", type=int)
    p.add_argument("--backend")
    p.add_argument("--dry-run", action="store_true", help="print the plan only")
    p.add_argument("--out", default="manifests/augmented.jsonl")

    def train_flags(p):
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--base-lr", dest="base_lr", type=float)
        p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr-decay", dest="lr_decay", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--decay-period-epochs", dest="decay_period_epochs", type=int)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--no-fine-tune", dest="no_fine_tune", action="store_true")
        p.add_argument("--level")

    p = sub.add_parser("train", help="contrastive fine-tuning")
    p.add_argument("--manifest", default="augmented")
    p.add_argument("--checkpoint", default="checkpoints/model")
    p.add_argument("--resume", action="store_true")
    train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", default="checkpoints/model")
    p.add_argument("--manifest", default="split")
    p.add_argument("--level")
    p.add_argument("--name", default="model")
    p.add_argument("--out")

    p = sub.add_parser("fewshot", help="k-shot baseline vs augmented comparison")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--manifest", default="split")
    p.add_argument("--no-augment", action="store_true", help="run the baseline only")
    p.add_argument("--target", type=int)
    train_flags(p)

    p = sub.add_parser("predict", help="ranked categories for one image")
    p.add_argument("--checkpoint", default="checkpoints/model")
    p.add_argument("--image", required=True)
    p.add_argument("--level")
    p.add_argument("--top-n", dest="top_n", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        ws = Workspace(cfg.workspace)
        handler = COMMANDS[args.command]
        if args.command in MUTATING:
            with ws.lock():
                handler(args, cfg, ws)
        else:
            handler(args, cfg, ws)
    except (FishAIError, ValueError, OSError) as exc:
        print(f"fishai {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
