"""Family/genus/species records and per-level label spaces."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping

from .errors import EmptyField

_ITALIC_TAGS = re.compile(r"</?\s*(?:i|em)\s*>", re.IGNORECASE)
_ITALIC_CHARS = re.compile(r"[*_]")
_SPACES = re.compile(r"\s+")


class TaxonomicLevel(IntEnum):
    """Taxonomic rank, ordered coarse to fine."""

    FAMILY = 0
    GENUS = 1
    SPECIES = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "TaxonomicLevel":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown taxonomic level {value!r}") from None


LEVELS = tuple(TaxonomicLevel)


def normalize_name(raw: str) -> str:
    text = _ITALIC_TAGS.sub("", raw)
    text = _ITALIC_CHARS.sub("", text)
    return _SPACES.sub(" ", text).strip()


@dataclass(frozen=True, order=True)
class TaxonRecord:
    family: str
    genus: str
    species: str

    def at(self, level) -> str:
        level = TaxonomicLevel.parse(level)
        return (self.family, self.genus, self.species)[level]


def normalize_taxon(raw_family: str, raw_genus: str, raw_species: str) -> TaxonRecord:
    """Build a :class:`TaxonRecord` from raw strings.

    Whitespace runs collapse to one space, surrounding space is trimmed and
    italic markup (``*``, ``_``, ``<i>``/``<em>`` tags) is dropped. Case is
    kept as given because scientific names are case-significant.
    """
    fields = {}
    for name, raw in (("family", raw_family), ("genus", raw_genus), ("species", raw_species)):
        value = normalize_name(raw if raw is not None else "")
        if not value:
            raise EmptyField(f"{name} is empty after normalization (raw={raw!r})")
        fields[name] = value
    return TaxonRecord(**fields)


@dataclass(frozen=True)
class LabelSpace:
    level: TaxonomicLevel
    categories: tuple[str, ...]
    index: Mapping[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("label space categories must be unique")
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.categories)})

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, name) -> bool:
        return name in self.index

    def __iter__(self):
        return iter(self.categories)

    def name(self, idx: int) -> str:
        return self.categories[idx]


def build_label_space(records: Iterable[TaxonRecord], level) -> LabelSpace:
    level = TaxonomicLevel.parse(level)
    records = list(records)
    if not records:
        raise ValueError("build_label_space needs at least one record")
    return LabelSpace(level, tuple(sorted({r.at(level) for r in records})))


def level_counts(records: Iterable[TaxonRecord], level) -> dict[str, int]:
    level = TaxonomicLevel.parse(level)
    return dict(Counter(r.at(level) for r in records))
