"""Stage composition shared by the CLI, the demos and the acceptance experiments.

Workspace layout (relative paths in manifests resolve against the workspace
root)::

    manifests/            raw.jsonl, split.jsonl, augmented.jsonl, ...
    cache/descriptions/   one JSON file per description cache key
    synthetic/            generated images, latents, generation.jsonl
    checkpoints/          one directory per trained model
    reports/              EvalReport JSON files and rendered tables
    images/               toy dataset images (make-toy only)
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import yaml

from . import augmentor, dataset, evaluator, promptgen, trainer
from .dataset import DatasetManifest, ToyDatasetConfig
from .errors import WorkspaceLocked
from .io import config_hash
from .taxonomy import TaxonomicLevel

FIXED_CLOCK = "1970-01-01T00:00:00+00:00"


def _strict(cls, obj: Mapping | None, section: str):
    obj = dict(obj or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {unknown}")
    return cls(**obj)


@dataclass(frozen=True)
class DatasetSection:
    train_fraction: float = 0.8
    level: str = "species"
    toy_class_count: int = 15
    toy_largest: int = 200
    toy_smallest: int = 2
    toy_counts: tuple[int, ...] | None = None
    toy_image_size: int = 32
    toy_noise: float = 1.5

    def toy_config(self, seed: int) -> ToyDatasetConfig:
        counts = self.toy_counts or dataset.long_tail_profile(self.toy_class_count, self.toy_largest, self.toy_smallest)
        return ToyDatasetConfig(tuple(counts), self.toy_image_size, self.toy_noise, seed)


@dataclass(frozen=True)
class PromptgenSection:
    client_id: str = "mock-text-v1"
    model_name: str = "mock"
    timeout_s: float = 60.0
    template_id: str = promptgen.DEFAULT_TEMPLATE
    max_workers: int = 1

    def client_config(self) -> promptgen.TextClientConfig:
        return promptgen.TextClientConfig(self.client_id, self.model_name, self.timeout_s)


@dataclass(frozen=True)
class AugmentSection:
    target: int = 10
    backend_id: str = "mock-sd-v1"
    model_name: str = "stabilityai/stable-diffusion-2-base"
    guidance_scale: float = 7.5
    steps: int = 50
    device: str = "cpu"
    image_size: int | None = None
    max_workers: int = 1

    def backend_config(self) -> augmentor.ImageBackendConfig:
        return augmentor.ImageBackendConfig(self.backend_id, self.model_name, self.guidance_scale, self.steps,
                                            self.device)


@dataclass(frozen=True)
class EvalSection:
    level: str = "species"
    top_n: int = 5
    fewshot_ks: tuple[int, ...] = (1, 5, 10)


# plain gradient descent on the toy projections needs a far larger step than 1e-4
TOY_TRAIN = {"base_lr": 0.05, "epochs": 10, "warmup_epochs": 1}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    promptgen: PromptgenSection = field(default_factory=PromptgenSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: trainer.TrainConfig = field(default_factory=lambda: trainer.TrainConfig(**TOY_TRAIN))
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    workspace: str = "workspace"

    @classmethod
    def from_dict(cls, obj: Mapping | None) -> "PipelineConfig":
        obj = dict(obj or {})
        top = {"dataset", "promptgen", "augment", "train", "eval", "seed", "workspace"}
        unknown = sorted(set(obj) - top)
        if unknown:
            raise ValueError(f"unknown top-level config keys: {unknown}")
        train_obj = {**TOY_TRAIN, **(obj.get("train") or {})}
        ds = dict(obj.get("dataset") or {})
        if ds.get("toy_counts") is not None:
            ds["toy_counts"] = tuple(ds["toy_counts"])
        ev = dict(obj.get("eval") or {})
        if "fewshot_ks" in ev:
            ev["fewshot_ks"] = tuple(ev["fewshot_ks"])
        return cls(
            dataset=_strict(DatasetSection, ds, "dataset"),
            promptgen=_strict(PromptgenSection, obj.get("promptgen"), "promptgen"),
            augment=_strict(AugmentSection, obj.get("augment"), "augment"),
            train=trainer.TrainConfig.from_json(train_obj),
            eval=_strict(EvalSection, ev, "eval"),
            seed=int(obj.get("seed", 0)),
            workspace=str(obj.get("workspace", "workspace")),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        for sec in ("dataset", "eval"):
            for k, v in d[sec].items():
                if isinstance(v, tuple):
                    d[sec][k] = list(v)
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, **overrides) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    @property
    def descriptions(self) -> Path:
        return self.root / "cache" / "descriptions"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def manifest(self, name: str) -> Path:
        return self.manifests / (name if name.endswith(".jsonl") else f"{name}.jsonl")

    def resolve(self, path) -> Path:
        """Paths given on the command line are workspace-relative unless absolute or existing."""
        p = Path(path)
        if p.is_absolute() or p.exists():
            return p
        return self.root / p

    def init(self) -> "Workspace":
        for p in (self.manifests, self.descriptions, self.checkpoints, self.reports, self.root / "synthetic"):
            p.mkdir(parents=True, exist_ok=True)
        return self

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLocked(f"workspace {self.root} is locked by another command ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            path.unlink(missing_ok=True)

    def description_cache(self) -> promptgen.DescriptionCache:
        return promptgen.DescriptionCache(self.descriptions)


def stamp(manifest: DatasetManifest, cfg_hash: str) -> DatasetManifest:
    return manifest.with_records(manifest.records, provenance=f"{manifest.provenance} | config={cfg_hash}")


def describe_level(ws: Workspace, manifest: DatasetManifest, level, section: PromptgenSection,
                   client=None) -> dict[str, str]:
    client = client or promptgen.make_text_client(section.client_config())
    clock = (lambda: FIXED_CLOCK) if isinstance(client, promptgen.MockTextClient) else promptgen.utc_now
    records = promptgen.describe_all(client, manifest.label_space(level), ws.description_cache(),
                                     section.template_id, clock, section.max_workers)
    return promptgen.description_map(records)


def image_backend_for(manifest: DatasetManifest, section: AugmentSection):
    toy = dataset.toy_config_from_manifest(manifest)
    return augmentor.make_image_backend(section.backend_config(), toy)


def default_image_size(manifest: DatasetManifest, section: AugmentSection) -> int:
    if section.image_size:
        return section.image_size
    toy = dataset.toy_config_from_manifest(manifest)
    return toy.image_size if toy else 512


def augment_manifest(ws: Workspace, manifest: DatasetManifest, level, descriptions: Mapping[str, str],
                     section: AugmentSection, base_seed: int, subdir: str = augmentor.SYNTHETIC_DIR,
                     backend=None):
    """Plan on REAL train counts, generate, merge. Returns ``(plan, augmented manifest)``."""
    plan = augmentor.plan_augmentation(manifest.train_counts(level, dataset.Source.REAL), section.target)
    backend = backend or image_backend_for(manifest, section)
    results = augmentor.generate_batch(backend, plan, descriptions, base_seed, ws.root, level,
                                       default_image_size(manifest, section), section.max_workers, subdir)
    return plan, augmentor.merge_synthetic(manifest, results, level)


@dataclass
class VariantResult:
    report: evaluator.EvalReport
    log: trainer.TrainLog
    manifest: DatasetManifest
    checkpoint: Path | None


def run_variant(ws: Workspace, manifest: DatasetManifest, cfg: PipelineConfig, augment: bool, name: str,
                descriptions: Mapping[str, str] | None = None) -> VariantResult:
    """Optionally augment, then train and evaluate one model on ``manifest``."""
    level = TaxonomicLevel.parse(cfg.train.level)
    if descriptions is None:
        descriptions = describe_level(ws, manifest, level, cfg.promptgen)
    train_manifest = manifest
    if augment:
        _, train_manifest = augment_manifest(ws, manifest, level, descriptions, cfg.augment, cfg.seed,
                                             subdir=f"synthetic/{name}")
    ckpt = ws.checkpoints / name
    backend, log = trainer.train(cfg.train, train_manifest, descriptions, ws.root, ckpt)
    report = evaluator.evaluate_backend(backend, manifest, level, descriptions, ws.root, cfg.train.digest(),
                                        bins_from=manifest)
    report = evaluator.with_extra(report, variant=name, augmented=augment, pipeline_config=cfg.digest())
    report.save(ws.reports / f"{name}.json")
    return VariantResult(report, log, train_manifest, ckpt)


def prepare_toy(ws: Workspace, cfg: PipelineConfig) -> DatasetManifest:
    """Generate and split the toy dataset for ``cfg.seed``; returns the split manifest."""
    ws.init()
    raw, _ = dataset.make_toy_dataset(cfg.dataset.toy_config(cfg.seed), ws.root)
    manifest = dataset.split(raw, cfg.dataset.train_fraction, cfg.seed)
    manifest.save(ws.manifest("split"))
    return manifest


def fewshot(ws: Workspace, manifest: DatasetManifest, cfg: PipelineConfig, k: int, augment: bool = True):
    """k-shot subsample, then baseline and (optionally) augmented runs on the same subsample.

    Returns ``(baseline, augmented | None, delta rows | None)``.
    """
    level = TaxonomicLevel.parse(cfg.train.level)
    sub = evaluator.few_shot_subsample(manifest, evaluator.FewShotSpec(k, cfg.seed), level)
    sub.save(ws.manifest(f"fewshot_k{k}"))
    descriptions = describe_level(ws, sub, level, cfg.promptgen)
    base = run_variant(ws, sub, cfg, False, f"fewshot_k{k}_baseline", descriptions)
    if not augment:
        return base, None, None
    aug = run_variant(ws, sub, cfg, True, f"fewshot_k{k}_augmented", descriptions)
    rows = evaluator.compare_reports(aug.report, base.report)
    table = evaluator.render_delta_table(rows, ("augmented", "baseline"))
    (ws.reports / f"fewshot_k{k}_delta.txt").write_text(table + "\n", encoding="utf-8")
    return base, aug, rows


def dump_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
