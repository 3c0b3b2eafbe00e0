import re

import numpy as np
import pytest
import yaml

from fishai import dataset
from fishai.cli import main
from fishai.dataset import DatasetManifest, ImageRecord, Source, Split
from fishai.taxonomy import TaxonRecord

CONFIG = {
    "dataset": {"toy_counts": [24, 12, 6, 3, 2], "toy_image_size": 32},
    "train": {"epochs": 2, "embed_dim": 32, "batch_size": 8},
    "augment": {"target": 10},
}


@pytest.fixture
def ws(tmp_path):
    cfg = tmp_path / "config.yaml"
    cfg.write_text(yaml.safe_dump({**CONFIG, "workspace": str(tmp_path / "ws")}))

    def run(*argv):
        return main(["--config", str(cfg), *argv])

    return run, tmp_path / "ws"


@pytest.fixture
def prepared(ws):
    run, root = ws
    assert run("make-toy") == 0
    assert run("split") == 0
    return run, root


def test_stats_histogram_sums_to_classes(prepared, capsys):
    run, _ = prepared
    capsys.readouterr()
    assert run("stats", "--level", "species") == 0
    out = capsys.readouterr().out
    assert "# of categories" in out
    m = re.search(r"small: (\d+)\s+medium: (\d+)\s+large: (\d+)\s+\(total (\d+)\)", out)
    assert m and sum(map(int, m.groups()[:3])) == int(m.group(4)) == 5


def test_split_twice_is_identical(prepared):
    run, root = prepared
    first = (root / "manifests" / "split.jsonl").read_bytes()
    assert run("split", "--out", "manifests/split2.jsonl") == 0
    assert (root / "manifests" / "split2.jsonl").read_bytes() == first


def test_ingest_malformed_row(ws, tmp_path, capsys):
    run, _ = ws
    dataset.save_png(tmp_path / "a.png", np.zeros((8, 8, 3), np.uint8))
    csv = tmp_path / "rows.csv"
    csv.write_text("path,family,genus,species\na.png,F,G,S\nb.png,F,G\n")
    assert run("ingest", str(csv), str(tmp_path)) == 1
    err = capsys.readouterr().err
    assert "error" in err and "line 3" in err


def _custom_manifest(root):
    records = []
    for c, n in zip("ABCD", (1, 5, 50, 500)):
        taxon = TaxonRecord(f"F{c}", f"G{c}", f"S{c}")
        for i in range(n):
            records.append(ImageRecord(f"{c}{i}", f"x/{c}{i}.png", taxon, Source.REAL, Split.TRAIN, 8, 8))
        records.append(ImageRecord(f"{c}t", f"x/{c}t.png", taxon, Source.REAL, Split.TEST, 8, 8))
    DatasetManifest(tuple(records), split_seed=0).save(root / "manifests" / "custom.jsonl")


def test_augment_dry_run_quota(ws, capsys):
    run, root = ws
    _custom_manifest(root)
    assert run("augment", "--manifest", "custom", "--dry-run") == 0
    out = capsys.readouterr().out
    assert "total quota 14" in out
    assert "SA: 9" in out and "SB: 5" in out and "SC:" not in out


def test_augment_without_descriptions_names_class(prepared, capsys):
    run, _ = prepared
    assert run("augment") == 1
    assert "Species4" in capsys.readouterr().err


def test_full_pipeline(prepared, tmp_path, capsys):
    run, root = prepared
    assert run("describe") == 0
    assert run("augment") == 0
    aug = DatasetManifest.load(root / "manifests" / "augmented.jsonl")
    assert len(aug.select(Split.TRAIN, Source.SYNTHETIC)) > 0
    assert run("train") == 0
    capsys.readouterr()
    assert run("eval") == 0
    out = capsys.readouterr().out
    assert re.search(r"model\s+\d+\.\d\d%/\d+\.\d\d%", out)
    assert (root / "reports" / "eval_species.json").exists()

    image = root / aug.test[0].path
    assert run("predict", "--image", str(image), "--top-n", "5") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    scores = [float(line.split("\t")[1]) for line in lines]
    assert scores == sorted(scores, reverse=True)
    assert [line.split(".")[0] for line in lines] == ["1", "2", "3", "4", "5"]

    assert run("train", "--resume") == 0


def test_fewshot_outputs(prepared, capsys):
    run, root = prepared
    assert run("fewshot", "--k", "1") == 0
    out = capsys.readouterr().out
    assert "augmented" in out and "baseline" in out and "pp" in out
    reports = root / "reports"
    assert (reports / "fewshot_k1_baseline.json").exists()
    assert (reports / "fewshot_k1_augmented.json").exists()
    assert (reports / "fewshot_k1_delta.txt").exists()
    sub = DatasetManifest.load(root / "manifests" / "fewshot_k1.jsonl")
    assert set(sub.train_counts("species").values()) == {1}


def test_locked_workspace(prepared, capsys):
    run, root = prepared
    (root / ".lock").write_text("123")
    assert run("split") == 1
    assert "locked" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    assert main(["--config", str(bad), "--workspace", str(tmp_path / "w"), "make-toy"]) == 1
    assert "epochz" in capsys.readouterr().err
