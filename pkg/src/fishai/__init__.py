"""Few-shot fish classification with generative minority-class augmentation.

Stages: taxonomy/dataset ingestion and splitting, class description
generation (promptgen), synthetic image + latent generation (augmentor),
latent-fused contrastive fine-tuning (model, trainer) and long-tail /
few-shot evaluation (evaluator). Heavy models sit behind small backend
interfaces with deterministic offline mocks.
"""

from .dataset import (
    DatasetManifest,
    ImageRecord,
    SizeBin,
    Source,
    Split,
    ToyDatasetConfig,
)
from .errors import FishAIError
from .taxonomy import LabelSpace, TaxonomicLevel, TaxonRecord

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "FishAIError",
    "ImageRecord",
    "LabelSpace",
    "SizeBin",
    "Source",
    "Split",
    "TaxonRecord",
    "TaxonomicLevel",
    "ToyDatasetConfig",
]
