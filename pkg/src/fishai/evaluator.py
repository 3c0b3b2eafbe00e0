"""Top-k accuracy, cross-entropy, size-binned macro accuracy and few-shot subsampling.

Reports store every accuracy as an exact ratio ``{num, den, pct}`` so that
comparisons never depend on float formatting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import DatasetManifest, SizeBin, Source, Split, assign_bins, load_image
from .errors import (
    ConfigMismatch,
    EmptyPredictions,
    LevelMismatch,
    MissingBin,
    NonFiniteScore,
)
from .io import atomic_write_text, stable_hash
from .model import (
    ToyEncoderBackend,
    embed_texts,
    load_checkpoint,
    preprocess_image,
    rank_scores,
)
from .taxonomy import TaxonomicLevel
from .trainer import label_space_hash

TOP_KS = (1, 2, 3, 4, 5)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    sample_ids: tuple[str, ...]
    labels: np.ndarray
    rankings: np.ndarray
    scores: np.ndarray
    categories: tuple[str, ...] = ()

    @classmethod
    def from_scores(cls, scores, labels, sample_ids=None, categories=()) -> "PredictionSet":
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64)
        ids = tuple(sample_ids) if sample_ids is not None else tuple(str(i) for i in range(len(labels)))
        return cls(ids, labels, rank_scores(scores), scores, tuple(categories))

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class FewShotSpec:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _ratio(x: Fraction) -> dict:
    return {"num": x.numerator, "den": x.denominator, "pct": f"{float(x) * 100:.2f}%"}


def _unratio(d: Mapping) -> Fraction:
    return Fraction(d["num"], d["den"])


def topk_hits(predictions: PredictionSet, k: int) -> int:
    if len(predictions) == 0:
        raise EmptyPredictions("no predictions")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, predictions.class_count)
    return int(np.sum(predictions.rankings[:, :k] == predictions.labels[:, None]))


def topk_ratio(predictions: PredictionSet, k: int) -> Fraction:
    return Fraction(topk_hits(predictions, k), len(predictions))


def topk_accuracy(predictions: PredictionSet, k: int) -> float:
    return float(topk_ratio(predictions, k))


def mean_cross_entropy(predictions: PredictionSet) -> float:
    """Mean of ``-log softmax(scores)[true]`` over samples."""
    if len(predictions) == 0:
        raise EmptyPredictions("no predictions")
    s = predictions.scores
    if not np.all(np.isfinite(s)):
        raise NonFiniteScore("score matrix contains non-finite values")
    m = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - m).sum(axis=1)) + m[:, 0]
    nll = lse - s[np.arange(len(s)), predictions.labels]
    # fixed-order reduction keeps reports bit-identical
    return float(np.add.reduce(nll) / len(nll))


def class_accuracies(predictions: PredictionSet) -> dict[int, Fraction]:
    top1 = predictions.rankings[:, 0] == predictions.labels
    out = {}
    for c in np.unique(predictions.labels):
        mask = predictions.labels == c
        out[int(c)] = Fraction(int(top1[mask].sum()), int(mask.sum()))
    return out


def binned_ratios(predictions: PredictionSet, bins: Mapping) -> dict[SizeBin, Fraction]:
    """Macro top-1 accuracy per size bin; bins without test classes are omitted.

    ``bins`` maps class index, or category name when the prediction set
    carries categories, to a :class:`SizeBin`.
    """
    if len(predictions) == 0:
        raise EmptyPredictions("no predictions")
    grouped: dict[SizeBin, list[Fraction]] = {}
    for c, acc in class_accuracies(predictions).items():
        key = c
        if c not in bins and predictions.categories:
            key = predictions.categories[c]
        if key not in bins:
            raise MissingBin(f"no size bin for test class {key!r}")
        grouped.setdefault(SizeBin(bins[key]), []).append(acc)
    return {b: sum(v, Fraction(0)) / len(v) for b, v in sorted(grouped.items(), key=lambda kv: list(SizeBin).index(kv[0]))}


def binned_accuracy(predictions: PredictionSet, bins: Mapping) -> dict[SizeBin, float]:
    return {b: float(v) for b, v in binned_ratios(predictions, bins).items()}


def few_shot_subsample(manifest: DatasetManifest, spec: FewShotSpec, level=TaxonomicLevel.SPECIES) -> DatasetManifest:
    """Keep ``min(k, n)`` real train samples per class; drop synthetic ones; Test is untouched."""
    level = TaxonomicLevel.parse(level)
    if not manifest.is_split:
        raise ValueError("few_shot_subsample needs a split manifest")
    by_class: dict[str, list[str]] = {}
    for r in manifest.select(Split.TRAIN, Source.REAL):
        by_class.setdefault(r.taxon.at(level), []).append(r.id)
    keep = set()
    for c, ids in by_class.items():
        if spec.k >= len(ids):
            keep.update(ids)
            continue
        rng = np.random.default_rng(stable_hash("fewshot", spec.seed, c))
        keep.update(ids[i] for i in rng.choice(len(ids), size=spec.k, replace=False))
    records = [
        r for r in manifest.records
        if r.split is Split.TEST or (r.source is Source.REAL and r.id in keep)
    ]
    return manifest.with_records(records, provenance=f"{manifest.provenance} | fewshot k={spec.k} seed={spec.seed}")


def predict(backend: ToyEncoderBackend, manifest: DatasetManifest, level, descriptions: Mapping[str, str], root,
            split: Split = Split.TEST) -> PredictionSet:
    """Classify every record of ``split`` against the embedded class descriptions."""
    level = TaxonomicLevel.parse(level)
    space = manifest.label_space(level)
    protos = embed_texts(backend, [descriptions.get(c) or c for c in space.categories])
    records = manifest.select(split)
    if not records:
        raise EmptyPredictions(f"no {split.value} records")
    feats = np.stack([backend.image_features(preprocess_image(load_image(Path(root) / r.path))) for r in records])
    emb, _ = backend.project_samples(feats)
    scores = emb @ protos.T / backend.tau
    labels = [space.index[r.taxon.at(level)] for r in records]
    return PredictionSet.from_scores(scores, labels, [r.id for r in records], space.categories)


@dataclass(frozen=True)
class EvalReport:
    level: TaxonomicLevel
    acc: dict[int, Fraction]
    cross_entropy: float
    bins: dict[SizeBin, Fraction]
    sample_count: int
    class_count: int
    config_hash: str = ""
    manifest_hash: str = ""
    label_hash: str = ""
    extra: dict = field(default_factory=dict)

    def accuracy(self, k: int) -> float:
        return float(self.acc[k])

    def bin_accuracy(self, b: SizeBin) -> float | None:
        b = SizeBin(b)
        return float(self.bins[b]) if b in self.bins else None

    def to_json(self) -> dict:
        return {
            "level": self.level.label,
            "acc": {f"acc@{k}": _ratio(v) for k, v in sorted(self.acc.items())},
            "cross_entropy": self.cross_entropy,
            "bins": {b.value: _ratio(v) for b, v in self.bins.items()},
            "sample_count": self.sample_count,
            "class_count": self.class_count,
            "config_hash": self.config_hash,
            "manifest_hash": self.manifest_hash,
            "label_hash": self.label_hash,
            "extra": self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        return cls(
            level=TaxonomicLevel.parse(obj["level"]),
            acc={int(k.split("@")[1]): _unratio(v) for k, v in obj["acc"].items()},
            cross_entropy=float(obj["cross_entropy"]),
            bins={SizeBin(b): _unratio(v) for b, v in obj["bins"].items()},
            sample_count=int(obj["sample_count"]),
            class_count=int(obj["class_count"]),
            config_hash=obj.get("config_hash", ""),
            manifest_hash=obj.get("manifest_hash", ""),
            label_hash=obj.get("label_hash", ""),
            extra=obj.get("extra", {}),
        )

    @classmethod
    def loads(cls, text: str) -> "EvalReport":
        return cls.from_json(json.loads(text))

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_report(predictions: PredictionSet, level, bins: Mapping, **hashes) -> EvalReport:
    return EvalReport(
        level=TaxonomicLevel.parse(level),
        acc={k: topk_ratio(predictions, k) for k in TOP_KS},
        cross_entropy=mean_cross_entropy(predictions),
        bins=binned_ratios(predictions, bins),
        sample_count=len(predictions),
        class_count=predictions.class_count,
        **hashes,
    )


def evaluate_backend(backend: ToyEncoderBackend, manifest: DatasetManifest, level, descriptions, root,
                     config_hash: str = "", bins_from: DatasetManifest | None = None) -> EvalReport:
    """Evaluate on the Test split; size bins come from REAL train counts of ``bins_from`` (default ``manifest``)."""
    level = TaxonomicLevel.parse(level)
    preds = predict(backend, manifest, level, descriptions, root)
    bins = assign_bins((bins_from or manifest).train_counts(level, Source.REAL))
    return build_report(preds, level, bins, config_hash=config_hash, manifest_hash=manifest.digest(),
                        label_hash=label_space_hash(manifest.label_space(level).categories))


def evaluate(checkpoint, manifest: DatasetManifest, level, descriptions, root,
             bins_from: DatasetManifest | None = None) -> EvalReport:
    level = TaxonomicLevel.parse(level)
    backend, meta = load_checkpoint(checkpoint)
    if meta.get("level") and TaxonomicLevel.parse(meta["level"]) is not level:
        raise ConfigMismatch(f"checkpoint was trained at {meta['level']}, evaluating at {level.label}")
    expected = label_space_hash(manifest.label_space(level).categories)
    if meta.get("label_hash") and meta["label_hash"] != expected:
        raise ConfigMismatch("checkpoint label space does not match the manifest")
    return evaluate_backend(backend, manifest, level, descriptions, root, meta.get("config_hash", ""), bins_from)


@dataclass(frozen=True)
class DeltaRow:
    metric: str
    a: Fraction | float | None
    b: Fraction | float | None
    delta: Fraction | float | None

    def delta_pp(self) -> float | None:
        return None if self.delta is None else float(self.delta) * 100


def compare_reports(report_a: EvalReport, report_b: EvalReport) -> list[DeltaRow]:
    """Per-metric ``a - b``. Accuracies are exact fractions; cross-entropy is a float."""
    if report_a.level is not report_b.level:
        raise LevelMismatch(f"{report_a.level.label} vs {report_b.level.label}")
    if report_a.label_hash and report_b.label_hash and report_a.label_hash != report_b.label_hash:
        raise LevelMismatch("reports use different label spaces")
    rows = [DeltaRow(f"acc@{k}", report_a.acc[k], report_b.acc[k], report_a.acc[k] - report_b.acc[k])
            for k in TOP_KS]
    for b in SizeBin:
        va, vb = report_a.bins.get(b), report_b.bins.get(b)
        rows.append(DeltaRow(f"bin:{b.value}", va, vb, None if va is None or vb is None else va - vb))
    rows.append(DeltaRow("cross_entropy", report_a.cross_entropy, report_b.cross_entropy,
                         report_a.cross_entropy - report_b.cross_entropy))
    return rows


def _pct(x) -> str:
    return "-" if x is None else f"{float(x) * 100:.2f}%"


def render_delta_table(rows: Sequence[DeltaRow], names=("A", "B")) -> str:
    lines = [f"{'metric':<14} {names[0]:>10} {names[1]:>10} {'delta':>11}"]
    for r in rows:
        if r.metric == "cross_entropy":
            lines.append(f"{r.metric:<14} {r.a:>10.4f} {r.b:>10.4f} {r.delta:>+11.4f}")
        else:
            delta = "-" if r.delta is None else f"{r.delta_pp():+.2f} pp"
            lines.append(f"{r.metric:<14} {_pct(r.a):>10} {_pct(r.b):>10} {delta:>11}")
    return "\n".join(lines)


def render_level_table(reports: Mapping[str, Sequence[EvalReport]]) -> str:
    """Rows per model, one ``acc1/acc5`` column per taxonomic level."""
    levels = sorted({r.level for rs in reports.values() for r in rs})
    header = "Model".ljust(24) + "".join(f"{lvl.label + '(acc1/acc5)':>26}" for lvl in levels)
    lines = [header]
    for name, rs in reports.items():
        by_level = {r.level: r for r in rs}
        cells = []
        for lvl in levels:
            r = by_level.get(lvl)
            cells.append(f"{(_pct(r.acc[1]) + '/' + _pct(r.acc[5])) if r else '-':>26}")
        lines.append(name.ljust(24) + "".join(cells))
    return "\n".join(lines)


def render_bin_table(reports: Mapping[str, EvalReport]) -> str:
    lines = ["Model".ljust(24) + "".join(f"{b.value:>10}" for b in SizeBin)]
    for name, r in reports.items():
        lines.append(name.ljust(24) + "".join(f"{_pct(r.bins.get(b)):>10}" for b in SizeBin))
    return "\n".join(lines)


def with_extra(report: EvalReport, **extra) -> EvalReport:
    return replace(report, extra={**report.extra, **extra})
