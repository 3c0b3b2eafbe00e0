import hashlib
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fishai import dataset
from fishai.dataset import DatasetManifest, ImageRecord, SizeBin, Source, Split
from fishai.errors import (
    AlreadySplit,
    DuplicateId,
    MalformedRow,
    MissingFile,
    NoClasses,
)
from fishai.taxonomy import TaxonRecord


def _oracle_train_count(n):
    # independent restatement of the tiny-class rule using decimal rounding
    if n == 1:
        return 1
    r = int((Decimal(n) * Decimal("0.8")).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(max(r, 1), n - 1)


# frozen from _oracle_train_count over n = 1..12
TRAIN_COUNTS = {1: 1, 2: 1, 3: 2, 4: 3, 5: 4, 6: 5, 7: 6, 8: 6, 9: 7, 10: 8, 11: 9, 12: 10}


def test_frozen_table_matches_oracle():
    assert {n: _oracle_train_count(n) for n in range(1, 13)} == TRAIN_COUNTS


def _manifest_with_class_sizes(sizes):
    records = []
    for c, n in enumerate(sizes):
        for i in range(n):
            records.append(ImageRecord(f"c{c}-{i}", f"c{c}/{i}.png", TaxonRecord(f"F{c}", f"G{c}", f"S{c}")))
    return DatasetManifest(tuple(records))


@pytest.mark.parametrize("n", range(1, 13))
def test_split_rule_per_class_size(n):
    m = dataset.split(_manifest_with_class_sizes([n]), 0.8, seed=0)
    assert len(m.train) == TRAIN_COUNTS[n]
    assert len(m.test) == n - TRAIN_COUNTS[n]


def test_split_examples():
    assert dataset.train_count(10) == 8
    assert dataset.train_count(1) == 1
    assert dataset.train_count(7) == 6 and dataset.train_count(2) == 1


def test_split_is_partition_and_deterministic():
    base = _manifest_with_class_sizes([1, 2, 5, 9, 12, 40])
    a = dataset.split(base, 0.8, seed=11)
    b = dataset.split(base, 0.8, seed=11)
    assert a.dumps() == b.dumps()
    train, test = {r.id for r in a.train}, {r.id for r in a.test}
    assert not train & test
    assert train | test == {r.id for r in base.records}
    for c in a.label_space("species"):
        n = sum(1 for r in base.records if r.taxon.species == c)
        k = sum(1 for r in a.train if r.taxon.species == c)
        if n >= 2:
            assert abs(k / n - 0.8) <= 1 / n


def test_split_depends_on_seed():
    base = _manifest_with_class_sizes([40])
    assert dataset.split(base, seed=0).dumps() != dataset.split(base, seed=1).dumps()


def test_split_twice_raises():
    m = dataset.split(_manifest_with_class_sizes([3]), seed=0)
    with pytest.raises(AlreadySplit):
        dataset.split(m, seed=0)


def _oracle_bin(n):
    if n < 10:
        return SizeBin.SMALL
    if 10 <= n and n <= 100:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


def test_bin_boundaries():
    got = dataset.assign_bins({"a": 0, "b": 9, "c": 10, "d": 100, "e": 101})
    assert [got[k] for k in "abcde"] == [SizeBin.SMALL, SizeBin.SMALL, SizeBin.MEDIUM, SizeBin.MEDIUM, SizeBin.LARGE]


def test_bins_agree_with_three_way_comparison():
    for n in range(0, 1001):
        assert dataset.size_bin(n) is _oracle_bin(n)


def test_long_tail_stats_histogram():
    # counts {1,5,50,500} as real train counts: brute-force binning gives Small 2, Medium 1, Large 1
    records = []
    for c, n in enumerate([1, 5, 50, 500]):
        records += [ImageRecord(f"{c}-{i}", f"{c}/{i}", TaxonRecord("F", "G", f"S{c}"), split=Split.TRAIN)
                    for i in range(n)]
    stats = dataset.long_tail_stats(DatasetManifest(tuple(records)), "species")
    expected = {b: 0 for b in SizeBin}
    for n in [1, 5, 50, 500]:
        expected[_oracle_bin(n)] += 1
    assert stats.histogram == expected == {SizeBin.SMALL: 2, SizeBin.MEDIUM: 1, SizeBin.LARGE: 1}
    assert sum(stats.histogram.values()) == stats.class_count == 4
    assert (stats.min_count, stats.max_count) == (1, 500)


def test_long_tail_uniform_all_medium():
    records = [ImageRecord(f"{c}-{i}", "p", TaxonRecord("F", "G", f"S{c}"), split=Split.TRAIN)
               for c in range(4) for i in range(10)]
    stats = dataset.long_tail_stats(DatasetManifest(tuple(records)), "species")
    assert stats.histogram[SizeBin.MEDIUM] == 4


def test_long_tail_empty_level():
    with pytest.raises(NoClasses):
        dataset.long_tail_stats(DatasetManifest(()), "family")


def test_synthetic_record_cannot_be_test():
    with pytest.raises(ValueError):
        ImageRecord("x", "p", TaxonRecord("F", "G", "S"), Source.SYNTHETIC, Split.TEST)


def test_duplicate_ids_rejected():
    r = ImageRecord("x", "p", TaxonRecord("F", "G", "S"))
    with pytest.raises(DuplicateId):
        DatasetManifest((r, r))


def test_manifest_roundtrip_bit_exact(small_split):
    _, m, _ = small_split
    text = m.dumps()
    assert DatasetManifest.loads(text).dumps() == text
    header = text.splitlines()[0]
    assert header.startswith('{"version":1,"split_seed":3,"levels":')
    first = text.splitlines()[1]
    assert list(__import__("json").loads(first)) == [
        "id", "path", "family", "genus", "species", "source", "split", "width", "height"]


def _sha(paths):
    return [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]


def test_toy_dataset_deterministic(tmp_path):
    cfg = dataset.ToyDatasetConfig((4, 2), image_size=16, prototype_noise=0.4, seed=5)
    m1, p1 = dataset.make_toy_dataset(cfg, tmp_path / "a")
    m2, p2 = dataset.make_toy_dataset(cfg, tmp_path / "b")
    assert _sha(p1) == _sha(p2)
    assert m1.dumps() == m2.dumps()
    assert m1.records[0].taxon == TaxonRecord("Family0", "Genus0", "Species0")


def test_toy_zero_noise_equals_prototype(tmp_path):
    cfg = dataset.ToyDatasetConfig((3, 2), image_size=16, prototype_noise=0.0, seed=2)
    _, paths = dataset.make_toy_dataset(cfg, tmp_path)
    protos = dataset.toy_prototypes(cfg)
    for p in paths[:3]:
        np.testing.assert_array_equal(dataset.load_image(p), protos[0])


def test_toy_counts_bin_histogram_after_split(tmp_path):
    cfg = dataset.ToyDatasetConfig((200, 30, 3), image_size=8, prototype_noise=0.1, seed=0)
    m, _ = dataset.make_toy_dataset(cfg, tmp_path)
    m = dataset.split(m, 0.8, seed=0)
    assert list(m.train_counts("species").values()) == [160, 24, 2]
    stats = dataset.long_tail_stats(m, "species")
    assert stats.histogram == {SizeBin.SMALL: 1, SizeBin.MEDIUM: 1, SizeBin.LARGE: 1}


def test_toy_config_validation():
    with pytest.raises(ValueError):
        dataset.ToyDatasetConfig((3, 0))
    with pytest.raises(ValueError):
        dataset.ToyDatasetConfig((3, 2), class_count=3)


def test_long_tail_profile_endpoints():
    prof = dataset.long_tail_profile(15, 200, 2)
    assert prof[0] == 200 and prof[-1] == 2 and len(prof) == 15
    assert list(prof) == sorted(prof, reverse=True)


def test_ingest(tmp_path):
    root = tmp_path / "imgs"
    img = np.zeros((4, 6, 3), dtype=np.uint8)
    for name in ("a.png", "b.png", "c.png"):
        dataset.save_png(root / name, img)
    src = tmp_path / "rows.csv"
    dataset.write_ingest_csv(src, [
        ("a.png", "Fam1", "G1", "S1"),
        ("b.png", " Fam2 ", "G2", "*S2*"),
        ("c.png", "Fam1", "G1", "S3"),
    ])
    m = dataset.ingest(src, root)
    assert len(m.records) == 3
    assert len(m.label_space("family")) == 2
    assert all(r.source is Source.REAL and r.split is Split.UNASSIGNED for r in m.records)
    assert (m.records[0].width, m.records[0].height) == (6, 4)
    assert m.records[1].taxon.species == "S2"


def test_ingest_errors(tmp_path):
    root = tmp_path
    dataset.save_png(root / "a.png", np.zeros((2, 2, 3), dtype=np.uint8))
    bad = tmp_path / "bad.csv"
    dataset.write_ingest_csv(bad, [("a.png", "F", "", "S")])
    with pytest.raises(MalformedRow, match="line 2"):
        dataset.ingest(bad, root)
    bad.write_text("path,family,genus,species\na.png,F,G\n")
    with pytest.raises(MalformedRow):
        dataset.ingest(bad, root)
    dataset.write_ingest_csv(bad, [("missing.png", "F", "G", "S")])
    with pytest.raises(MissingFile):
        dataset.ingest(bad, root)
    dataset.write_ingest_csv(bad, [("a.png", "F", "G", "S"), ("a.png", "F", "G", "S")])
    with pytest.raises(DuplicateId):
        dataset.ingest(bad, root)


@given(st.lists(st.integers(1, 15), min_size=1, max_size=8), st.integers(0, 2**32))
def test_split_property_partition(sizes, seed):
    base = _manifest_with_class_sizes(sizes)
    m = dataset.split(base, 0.8, seed)
    assert len(m.train) + len(m.test) == len(base.records)
    assert len(m.train) == sum(TRAIN_COUNTS.get(n, _oracle_train_count(n)) for n in sizes)
