"""
Class descriptions and synthetic images
=======================================

Each species gets a text description from a (mock) language model; small
classes are then topped up with synthetic images drawn from those
descriptions.
"""

import tempfile
from pathlib import Path

from fishai import augmentor, dataset, promptgen

root = Path(tempfile.mkdtemp(prefix="fishai-demo-"))
config = dataset.ToyDatasetConfig(dataset.long_tail_profile(15, 200, 2), image_size=32)
raw, _ = dataset.make_toy_dataset(config, root)
manifest = dataset.split(raw, 0.8, seed=0)

##############################################################################
# One prompt per category. Responses are cached on disk, so a second call
# costs nothing.
cache = promptgen.DescriptionCache(root / "cache")
client = promptgen.MockTextClient()
records = promptgen.describe_all(client, manifest.label_space("species"), cache)
print(records[0].prompt_text)
print(records[0].description)
promptgen.describe_all(client, manifest.label_space("species"), cache)
print("client calls:", client.calls)

##############################################################################
# Classes below the target of 10 training images get max(0, 10 - n) new ones.
plan = augmentor.plan_augmentation(manifest.train_counts("species"), 10)
print({c: q for c, q in plan.quotas.items() if q}, "total", plan.total)

##############################################################################
# The mock generator draws near the class prototype named in the
# description and also returns a 4-channel latent at 1/8 resolution.
backend = augmentor.make_image_backend(toy_config=config)
descriptions = promptgen.description_map(records)
results = augmentor.generate_batch(backend, plan, descriptions, 0, root, image_size=32)
print("latent shape:", results[0].latent.shape)

augmented = augmentor.merge_synthetic(manifest, results)
print("real train counts     :", list(augmented.train_counts("species").values()))
print("real+synthetic counts :", list(augmented.train_counts("species", source=None).values()))
