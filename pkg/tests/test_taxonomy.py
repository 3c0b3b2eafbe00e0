import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fishai.errors import EmptyField
from fishai.taxonomy import (
    LabelSpace,
    TaxonomicLevel,
    TaxonRecord,
    build_label_space,
    level_counts,
    normalize_name,
    normalize_taxon,
)


def test_normalize_trims_whitespace():
    t = normalize_taxon("  Pristiophoridae ", "X", "Y")
    assert t.family == "Pristiophoridae"


def test_normalize_strips_italic_markers():
    t = normalize_taxon("Cyprinidae", "Hypophthalmichthys", "*Hypophthalmichthys molitrix*")
    assert t.species == "Hypophthalmichthys molitrix"
    assert normalize_taxon("<i>Pristiophoridae</i>", "G", "S").family == "Pristiophoridae"


def test_normalize_collapses_internal_runs_and_keeps_case():
    t = normalize_taxon("F", "G", "Chilodus \t  punctatus")
    assert t.species == "Chilodus punctatus"


@pytest.mark.parametrize("args", [("", "G", "S"), ("F", "  ", "S"), ("F", "G", "**")])
def test_normalize_empty_field(args):
    with pytest.raises(EmptyField):
        normalize_taxon(*args)


@given(st.text())
def test_normalize_is_idempotent(raw):
    once = normalize_name(raw)
    assert normalize_name(once) == once


def test_level_order():
    assert TaxonomicLevel.FAMILY < TaxonomicLevel.GENUS < TaxonomicLevel.SPECIES
    assert TaxonomicLevel.parse("Genus") is TaxonomicLevel.GENUS


def test_label_space_dedupes_and_sorts():
    recs = [TaxonRecord("B", "g1", "s1"), TaxonRecord("A", "g2", "s2"), TaxonRecord("A", "g3", "s3")]
    space = build_label_space(recs, TaxonomicLevel.FAMILY)
    assert space.categories == ("A", "B")
    assert len(space) == 2


def test_label_space_570_families():
    recs = [TaxonRecord(f"Family{i:03d}", "G", "S") for i in range(570)] * 2
    assert len(build_label_space(recs, "family")) == 570


def test_label_space_species_matches_set_cardinality():
    rng = random.Random(0)
    recs = [TaxonRecord(f"F{rng.randrange(5)}", f"G{rng.randrange(20)}", f"S{rng.randrange(60)}") for _ in range(300)]
    expected = len({r.species for r in recs})
    assert len(build_label_space(recs, TaxonomicLevel.SPECIES)) == expected


def test_label_space_rejects_duplicates():
    with pytest.raises(ValueError):
        LabelSpace(TaxonomicLevel.FAMILY, ("A", "A"))


taxa = st.builds(
    TaxonRecord,
    st.sampled_from(["Fa", "Fb", "Fc"]),
    st.sampled_from(["Ga", "Gb", "Gc", "Gd"]),
    st.sampled_from(["Sa", "Sb", "Sc", "Sd", "Se"]),
)


@given(st.lists(taxa, min_size=1, max_size=40), st.randoms(), st.sampled_from(list(TaxonomicLevel)))
def test_label_space_permutation_invariant_and_bijective(recs, rnd, level):
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    a, b = build_label_space(recs, level), build_label_space(shuffled, level)
    assert a.categories == b.categories
    for i, name in enumerate(a.categories):
        assert a.index[name] == i and a.name(a.index[name]) == name


def test_level_counts_examples():
    recs = [TaxonRecord("A", "g", "s"), TaxonRecord("A", "g", "s"), TaxonRecord("B", "g", "s")]
    assert level_counts(recs, "family") == {"A": 2, "B": 1}
    assert level_counts([], "family") == {}


def test_level_counts_sum_matches_tally():
    rng = random.Random(1)
    recs = [TaxonRecord(f"F{rng.randrange(7)}", "G", f"S{rng.randrange(30)}") for _ in range(1000)]
    for level in TaxonomicLevel:
        counts = level_counts(recs, level)
        assert sum(counts.values()) == 1000
        tally = {}
        for r in recs:
            tally[r.at(level)] = tally.get(r.at(level), 0) + 1
        assert counts == tally
