"""
Long-tailed toy dataset, split and size bins
============================================

Builds the procedural 15-class toy dataset, splits it per species and shows
how many classes fall into each size bin.
"""

import tempfile
from pathlib import Path

from fishai import dataset

root = Path(tempfile.mkdtemp(prefix="fishai-demo-"))

##############################################################################
# Class sizes follow a geometric profile from 200 images down to 2.
counts = dataset.long_tail_profile(15, 200, 2)
print("images per class:", counts)

config = dataset.ToyDatasetConfig(counts, image_size=32, seed=0)
raw, paths = dataset.make_toy_dataset(config, root)
print(f"wrote {len(paths)} images under {root}")

##############################################################################
# The split is stratified at species level. A class of n images keeps
# round(0.8 n) for training, but always at least one image on each side.
manifest = dataset.split(raw, 0.8, seed=0)
for n in (1, 2, 3, 5, 12):
    print(f"n={n:3d} -> train {dataset.train_count(n)}")

##############################################################################
# Size bins use real training counts only.
stats = dataset.long_tail_stats(manifest, "species")
print(stats.summary())
for cls, n in manifest.train_counts("species").items():
    print(f"{cls:10s} {n:4d}  {dataset.size_bin(n).value}")
