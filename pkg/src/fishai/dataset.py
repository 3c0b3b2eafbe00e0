"""Image manifests: ingestion, the stratified 8:2 split, size bins and a toy dataset.

The manifest file is line-delimited JSON. The first line is a header object
``{version, split_seed, levels, provenance}``; every following line is one
record ``{id, path, family, genus, species, source, split, width, height}``
in that key order.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import (
    AlreadySplit,
    DuplicateId,
    EmptyField,
    MalformedRow,
    MissingFile,
    NoClasses,
)
from .io import atomic_write_text, sha256_hex, stable_hash
from .taxonomy import (
    LEVELS,
    LabelSpace,
    TaxonomicLevel,
    TaxonRecord,
    build_label_space,
    normalize_taxon,
)

MANIFEST_VERSION = 1
INGEST_COLUMNS = ("path", "family", "genus", "species")
STRATIFY_LEVEL = TaxonomicLevel.SPECIES


class Source(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"
    UNASSIGNED = "unassigned"


class SizeBin(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    taxon: TaxonRecord
    source: Source = Source.REAL
    split: Split = Split.UNASSIGNED
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.source is Source.SYNTHETIC and self.split is Split.TEST:
            raise ValueError(f"synthetic record {self.id} cannot be in the test split")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "family": self.taxon.family,
            "genus": self.taxon.genus,
            "species": self.taxon.species,
            "source": self.source.value,
            "split": self.split.value,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ImageRecord":
        return cls(
            id=obj["id"],
            path=obj["path"],
            taxon=TaxonRecord(obj["family"], obj["genus"], obj["species"]),
            source=Source(obj["source"]),
            split=Split(obj["split"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    split_seed: int | None = None
    provenance: str = ""
    levels: tuple[TaxonomicLevel, ...] = LEVELS

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DuplicateId(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    @cached_property
    def label_spaces(self) -> dict[TaxonomicLevel, LabelSpace]:
        taxa = [r.taxon for r in self.records]
        if not taxa:
            return {lvl: LabelSpace(lvl, ()) for lvl in self.levels}
        return {lvl: build_label_space(taxa, lvl) for lvl in self.levels}

    def label_space(self, level) -> LabelSpace:
        return self.label_spaces[TaxonomicLevel.parse(level)]

    def select(self, split: Split | None = None, source: Source | None = None) -> list[ImageRecord]:
        return [
            r
            for r in self.records
            if (split is None or r.split is split) and (source is None or r.source is source)
        ]

    @property
    def train(self) -> list[ImageRecord]:
        return self.select(Split.TRAIN)

    @property
    def test(self) -> list[ImageRecord]:
        return self.select(Split.TEST)

    @property
    def is_split(self) -> bool:
        return bool(self.records) and all(r.split is not Split.UNASSIGNED for r in self.records)

    def train_counts(self, level=STRATIFY_LEVEL, source: Source | None = Source.REAL) -> dict[str, int]:
        """Per-class train counts over every class of the label space (absent classes get 0)."""
        space = self.label_space(level)
        counts = Counter(r.taxon.at(level) for r in self.select(Split.TRAIN, source))
        return {c: counts.get(c, 0) for c in space}

    def with_records(self, records, **changes) -> "DatasetManifest":
        return replace(self, records=tuple(records), **changes)

    def header(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split_seed": self.split_seed,
            "levels": [lvl.label for lvl in self.levels],
            "provenance": self.provenance,
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), ensure_ascii=False, separators=(",", ":"))]
        lines += [json.dumps(r.to_json(), ensure_ascii=False, separators=(",", ":")) for r in self.records]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise ValueError("manifest is empty")
        header = json.loads(lines[0])
        if header.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {header.get('version')!r}")
        return cls(
            records=tuple(ImageRecord.from_json(json.loads(line)) for line in lines[1:]),
            split_seed=header["split_seed"],
            provenance=header["provenance"],
            levels=tuple(TaxonomicLevel.parse(x) for x in header["levels"]),
        )

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return sha256_hex(self.dumps())[:16]


def ingest(manifest_source, image_root, provenance: str = "") -> DatasetManifest:
    """Read a ``path,family,genus,species`` CSV into an unsplit manifest.

    Raises:
        MalformedRow: wrong column count or an empty taxon field; the
            message names the 1-based line number.
        MissingFile: an image path that cannot be opened.
        DuplicateId: the same path listed twice.
    """
    image_root = Path(image_root)
    records = []
    seen = set()
    with open(manifest_source, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != list(INGEST_COLUMNS):
            raise MalformedRow(f"line 1: header must be {','.join(INGEST_COLUMNS)}, got {header}", row=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(INGEST_COLUMNS):
                raise MalformedRow(f"line {lineno}: expected 4 columns, got {len(row)}", row=lineno)
            rel, fam, gen, spe = row
            rel = rel.strip()
            try:
                taxon = normalize_taxon(fam, gen, spe)
            except EmptyField as exc:
                raise MalformedRow(f"line {lineno}: {exc}", row=lineno) from exc
            if rel in seen:
                raise DuplicateId(f"line {lineno}: duplicate path {rel!r}")
            seen.add(rel)
            full = image_root / rel
            if not full.is_file() or not os.access(full, os.R_OK):
                raise MissingFile(f"line {lineno}: cannot read {full}")
            try:
                with Image.open(full) as im:
                    width, height = im.size
            except OSError as exc:
                raise MissingFile(f"line {lineno}: unreadable image {full}: {exc}") from exc
            records.append(ImageRecord(rel, rel, taxon, Source.REAL, Split.UNASSIGNED, width, height))
    return DatasetManifest(tuple(records), None, provenance or f"ingest:{Path(manifest_source).name}")


def train_count(n: int, train_fraction=0.8) -> int:
    """Number of a class's ``n`` images that go to Train.

    Round-half-up of ``fraction * n`` clamped to ``[1, n - 1]``; a class with a
    single image keeps it in Train.
    """
    if n <= 0:
        return 0
    if n == 1:
        return 1
    raw = math.floor(Fraction(str(train_fraction)) * n + Fraction(1, 2))
    return min(max(raw, 1), n - 1)


def split(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Stratified per-species random split. Pure function of (manifest, fraction, seed)."""
    if any(r.split is not Split.UNASSIGNED for r in manifest.records):
        raise AlreadySplit("manifest already has split assignments")
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.taxon.at(STRATIFY_LEVEL), []).append(i)
    assignment = {}
    for cls, idx in by_class.items():
        rng = np.random.default_rng(stable_hash("split", seed, cls))
        order = rng.permutation(len(idx))
        k = train_count(len(idx), train_fraction)
        for rank, j in enumerate(order):
            assignment[idx[j]] = Split.TRAIN if rank < k else Split.TEST
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    return manifest.with_records(records, split_seed=int(seed))


def size_bin(n: int) -> SizeBin:
    if n < 10:
        return SizeBin.SMALL
    if n <= 100:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


def assign_bins(train_counts: Mapping[str, int]) -> dict[str, SizeBin]:
    return {c: size_bin(n) for c, n in train_counts.items()}


@dataclass(frozen=True)
class LongTailStats:
    level: TaxonomicLevel
    class_count: int
    image_count: int
    min_count: int
    median_count: float
    max_count: int
    histogram: dict[SizeBin, int]

    def summary(self) -> str:
        hist = ", ".join(f"{b.value}={self.histogram[b]}" for b in SizeBin)
        return (
            f"{self.level.label}: {self.class_count} categories, {self.image_count} images; "
            f"train n min/median/max = {self.min_count}/{self.median_count:g}/{self.max_count}; "
            f"bins: {hist}"
        )


def long_tail_stats(manifest: DatasetManifest, level) -> LongTailStats:
    level = TaxonomicLevel.parse(level)
    counts = manifest.train_counts(level)
    if not counts:
        raise NoClasses(f"no classes at level {level.label}")
    values = list(counts.values())
    histogram = {b: 0 for b in SizeBin}
    for b in assign_bins(counts).values():
        histogram[b] += 1
    return LongTailStats(
        level=level,
        class_count=len(values),
        image_count=len(manifest.records),
        min_count=min(values),
        median_count=statistics.median(values),
        max_count=max(values),
        histogram=histogram,
    )


@dataclass(frozen=True)
class ToyDatasetConfig:
    """Procedural stand-in for a long-tailed image dataset.

    ``prototype_noise`` is the per-pixel Gaussian sigma as a fraction of the
    full 0..255 intensity range.
    """

    counts_per_class: tuple[int, ...]
    image_size: int = 32
    prototype_noise: float = 1.5
    seed: int = 0
    class_count: int | None = None

    def __post_init__(self):
        counts = tuple(int(n) for n in self.counts_per_class)
        object.__setattr__(self, "counts_per_class", counts)
        if self.class_count is None:
            object.__setattr__(self, "class_count", len(counts))
        if self.class_count != len(counts):
            raise ValueError("class_count must equal len(counts_per_class)")
        if any(n < 1 for n in counts):
            raise ValueError("every class needs at least one image")
        if self.image_size < 8 or self.prototype_noise < 0:
            raise ValueError("image_size must be >= 8 and prototype_noise >= 0")

    def to_json(self) -> dict:
        return {
            "class_count": self.class_count,
            "counts_per_class": list(self.counts_per_class),
            "image_size": self.image_size,
            "prototype_noise": self.prototype_noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToyDatasetConfig":
        return cls(
            counts_per_class=tuple(obj["counts_per_class"]),
            image_size=obj.get("image_size", 32),
            prototype_noise=obj.get("prototype_noise", 1.5),
            seed=obj.get("seed", 0),
            class_count=obj.get("class_count"),
        )


def long_tail_profile(class_count: int, largest: int, smallest: int) -> tuple[int, ...]:
    """Geometrically decaying per-class counts from ``largest`` down to ``smallest``."""
    if class_count == 1:
        return (largest,)
    ratio = (smallest / largest) ** (1.0 / (class_count - 1))
    return tuple(max(smallest, int(round(largest * ratio**c))) for c in range(class_count))


def toy_taxon(c: int) -> TaxonRecord:
    return TaxonRecord(f"Family{c}", f"Genus{c}", f"Species{c}")


def toy_prototypes(config: ToyDatasetConfig) -> list[np.ndarray]:
    """One smooth random uint8 image per class, seeded by (config.seed, class)."""
    size = config.image_size
    coarse = max(2, size // 4)
    protos = []
    for c in range(config.class_count):
        rng = np.random.default_rng(stable_hash("toy-prototype", config.seed, c))
        low = rng.uniform(0, 255, size=(coarse, coarse, 3)).astype(np.uint8)
        img = Image.fromarray(low, "RGB").resize((size, size), Image.BILINEAR)
        protos.append(np.asarray(img, dtype=np.uint8).copy())
    return protos


def noisy_sample(prototype: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return prototype.copy()
    noise = rng.normal(0.0, sigma * 255.0, size=prototype.shape)
    return np.clip(np.rint(prototype.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, "RGB").save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def make_toy_dataset(config: ToyDatasetConfig, out_dir) -> tuple[DatasetManifest, list[Path]]:
    """Write PNG samples under ``out_dir/images`` and return an unsplit manifest.

    Each sample is its class prototype plus Gaussian pixel noise, clipped and
    rounded to uint8. Output bytes depend only on ``config``.
    """
    out_dir = Path(out_dir)
    protos = toy_prototypes(config)
    records, paths = [], []
    for c, n in enumerate(config.counts_per_class):
        taxon = toy_taxon(c)
        for i in range(n):
            rng = np.random.default_rng(stable_hash("toy-sample", config.seed, c, i))
            img = noisy_sample(protos[c], config.prototype_noise, rng)
            rel = f"images/{taxon.species}/{i:05d}.png"
            save_png(out_dir / rel, img)
            paths.append(out_dir / rel)
            records.append(
                ImageRecord(
                    id=f"toy-{c:03d}-{i:05d}",
                    path=rel,
                    taxon=taxon,
                    width=config.image_size,
                    height=config.image_size,
                )
            )
    provenance = "toy:" + json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return DatasetManifest(tuple(records), None, provenance), paths


def toy_config_from_manifest(manifest: DatasetManifest) -> ToyDatasetConfig | None:
    if not manifest.provenance.startswith("toy:"):
        return None
    obj, _ = json.JSONDecoder().raw_decode(manifest.provenance[4:])
    return ToyDatasetConfig.from_json(obj)


def write_ingest_csv(path, rows: Iterable[tuple[str, str, str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INGEST_COLUMNS)
        writer.writerows(rows)

