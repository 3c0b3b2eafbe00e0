"""Synthetic minority-class images with latent encodings.

Files written by :func:`generate_batch` under ``root``::

    synthetic/<category>/<item:05d>.png      lossless image
    synthetic/<category>/<item:05d>.latent   raw float latent (see fishai.io)
    synthetic/generation.jsonl               one line per successful item
    synthetic/generation_failures.jsonl      one line per failed item (if any)

A latent file always sits next to its image with the ``.latent`` suffix.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from PIL import Image

from .dataset import (
    DatasetManifest,
    ImageRecord,
    Source,
    Split,
    ToyDatasetConfig,
    noisy_sample,
    save_png,
    toy_prototypes,
    toy_taxon,
)
from .errors import BackendFailure, MissingDescription, UnsplitManifest
from .io import atomic_write_bytes, encode_raw, read_jsonl, stable_hash, write_jsonl
from .taxonomy import TaxonomicLevel

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
LATENT_DOWNSCALE = 8
SYNTHETIC_DIR = "synthetic"
GENERATION_MANIFEST = "generation.jsonl"
GENERATION_FAILURES = "generation_failures.jsonl"


def latent_path_for(image_path) -> str:
    return str(Path(image_path).with_suffix(".latent").as_posix())


@dataclass(frozen=True)
class GenerationRequest:
    description: str
    category: str
    level: TaxonomicLevel = TaxonomicLevel.SPECIES
    seed: int = 0
    image_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "level", TaxonomicLevel.parse(self.level))
        if self.image_size <= 0 or self.image_size % LATENT_DOWNSCALE:
            raise ValueError(f"image_size must be a positive multiple of {LATENT_DOWNSCALE}")


@dataclass(frozen=True, eq=False)
class GenerationResult:
    image: np.ndarray
    latent: np.ndarray
    request: GenerationRequest
    backend_id: str
    item_index: int = 0
    image_path: str | None = None
    latent_path: str | None = None


@dataclass(frozen=True)
class AugmentationPlan:
    target_per_class: int
    quotas: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.quotas.values())


class ImageGenBackend(Protocol):
    backend_id: str

    def generate(self, request: GenerationRequest) -> GenerationResult: ...


@dataclass(frozen=True)
class ImageBackendConfig:
    backend_id: str = "mock-sd-v1"
    model_name: str = "stabilityai/stable-diffusion-2-base"
    guidance_scale: float = 7.5
    steps: int = 50
    device: str = "cpu"


def plan_augmentation(train_counts: Mapping[str, int], target: int = 10) -> AugmentationPlan:
    if target < 0:
        raise ValueError("target must be >= 0")
    return AugmentationPlan(target, {c: max(0, target - n) for c, n in train_counts.items()})


class MockImageGenBackend:
    """Desk-scale stand-in for a latent diffusion generator.

    If the description names a category in ``prototypes`` the image is that
    class prototype plus Gaussian noise, i.e. drawn near the real class
    manifold. Otherwise a texture hashed from the full description is used.
    The latent is a fixed 4-channel linear projection of 8x8 block means.
    """

    def __init__(self, prototypes: Mapping[str, np.ndarray] | None = None, sigma: float = 0.35,
                 backend_id: str = "mock-sd-v1"):
        self.prototypes = dict(prototypes or {})
        self.sigma = float(sigma)
        self.backend_id = backend_id
        names = sorted(self.prototypes, key=lambda s: (-len(s), s))
        self._pattern = (
            re.compile(r"(?<!\w)(" + "|".join(re.escape(n) for n in names) + r")(?!\w)") if names else None
        )
        self._mix = np.random.default_rng(stable_hash("latent-mix", backend_id)).normal(
            0.0, 1.0 / np.sqrt(3), size=(LATENT_CHANNELS, 3)
        )

    @classmethod
    def from_toy_config(cls, config: ToyDatasetConfig, **kwargs) -> "MockImageGenBackend":
        kwargs.setdefault("sigma", config.prototype_noise)
        return cls(toy_registry(config), **kwargs)

    def match_category(self, description: str) -> str | None:
        if self._pattern is None:
            return None
        m = self._pattern.search(description)
        return m.group(1) if m else None

    def base_image(self, description: str, size: int) -> np.ndarray:
        name = self.match_category(description)
        if name is not None:
            proto = self.prototypes[name]
            if proto.shape[:2] != (size, size):
                proto = np.asarray(Image.fromarray(proto, "RGB").resize((size, size), Image.BILINEAR))
            return proto
        rng = np.random.default_rng(stable_hash("texture", description))
        coarse = rng.uniform(0, 255, size=(max(2, size // 8),) * 2 + (3,)).astype(np.uint8)
        return np.asarray(Image.fromarray(coarse, "RGB").resize((size, size), Image.BILINEAR))

    def encode_latent(self, image: np.ndarray) -> np.ndarray:
        h, w, _ = image.shape
        f = LATENT_DOWNSCALE
        x = image.astype(np.float64) / 127.5 - 1.0
        blocks = x.reshape(h // f, f, w // f, f, 3).mean(axis=(1, 3))
        return np.einsum("kc,hwc->khw", self._mix, blocks).astype(np.float32)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        base = self.base_image(request.description, request.image_size)
        rng = np.random.default_rng(stable_hash("mock-gen", request.description, request.seed, request.image_size))
        image = noisy_sample(np.ascontiguousarray(base, dtype=np.uint8), self.sigma, rng)
        return GenerationResult(image, self.encode_latent(image), request, self.backend_id)


class DiffusersBackend:
    """Adapter for a real Stable Diffusion pipeline (needs the optional ``diffusers`` package).

    The denoised latent is captured before VAE decoding and returned together
    with the decoded image.
    """

    def __init__(self, config: ImageBackendConfig):
        try:
            import torch
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:
            raise BackendFailure(f"backend {config.backend_id!r} needs diffusers and torch: {exc}") from exc
        self.config = config
        self.backend_id = config.backend_id
        self._torch = torch
        self._pipe = StableDiffusionPipeline.from_pretrained(config.model_name).to(config.device)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        torch = self._torch
        gen = torch.Generator(device=self.config.device).manual_seed(request.seed % 2**63)
        out = self._pipe(
            request.description,
            height=request.image_size,
            width=request.image_size,
            guidance_scale=self.config.guidance_scale,
            num_inference_steps=self.config.steps,
            generator=gen,
            output_type="latent",
        )
        latent = out.images[0]
        with torch.no_grad():
            decoded = self._pipe.vae.decode(latent[None] / self._pipe.vae.config.scaling_factor).sample[0]
        image = ((decoded.clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).cpu().numpy()
        return GenerationResult(image, latent.float().cpu().numpy(), request, self.backend_id)


def toy_registry(config: ToyDatasetConfig) -> dict[str, np.ndarray]:
    registry = {}
    for c, proto in enumerate(toy_prototypes(config)):
        t = toy_taxon(c)
        for name in (t.family, t.genus, t.species):
            registry[name] = proto
    return registry


def make_image_backend(config: ImageBackendConfig | None = None, toy_config: ToyDatasetConfig | None = None,
                       sigma: float | None = None):
    config = config or ImageBackendConfig()
    if config.backend_id.startswith("mock"):
        registry = toy_registry(toy_config) if toy_config is not None else {}
        if sigma is None:
            sigma = toy_config.prototype_noise if toy_config is not None else 0.35
        return MockImageGenBackend(registry, sigma=sigma, backend_id=config.backend_id)
    return DiffusersBackend(config)


def item_seed(base_seed: int, category: str, index: int) -> int:
    return stable_hash("item", base_seed, category, index)


def _check_result(result: GenerationResult, request: GenerationRequest) -> None:
    size = request.image_size
    if result.image.shape != (size, size, 3) or result.image.dtype != np.uint8:
        raise BackendFailure(f"image shape {result.image.shape}/{result.image.dtype} does not match request")
    if not np.all(np.isfinite(result.latent)):
        raise BackendFailure("latent contains non-finite values")


def generate_batch(
    backend: ImageGenBackend,
    plan: AugmentationPlan,
    descriptions: Mapping[str, str],
    base_seed: int,
    root,
    level=TaxonomicLevel.SPECIES,
    image_size: int = 512,
    max_workers: int = 1,
    subdir: str = SYNTHETIC_DIR,
) -> list[GenerationResult]:
    """Generate ``plan.quotas[c]`` images per class and persist them under ``root``.

    Item ``i`` of class ``c`` uses seed ``item_seed(base_seed, c, i)``, so the
    output of one class never depends on which other classes are planned.
    Failed items are logged to the failures file and raised together as
    :class:`BackendFailure` after all successful items are written.
    """
    level = TaxonomicLevel.parse(level)
    root = Path(root)
    planned = sorted(c for c, q in plan.quotas.items() if q > 0)
    missing = [c for c in planned if not descriptions.get(c)]
    if missing:
        raise MissingDescription(missing)

    jobs = [(c, i) for c in planned for i in range(plan.quotas[c])]

    def run(job):
        c, i = job
        req = GenerationRequest(descriptions[c], c, level, item_seed(base_seed, c, i), image_size)
        try:
            res = backend.generate(req)
            _check_result(res, req)
        except Exception as exc:
            return job, req, exc
        img_rel = f"{subdir}/{c}/{i:05d}.png"
        lat_rel = latent_path_for(img_rel)
        save_png(root / img_rel, res.image)
        atomic_write_bytes(root / lat_rel, encode_raw(res.latent))
        return job, req, replace(res, item_index=i, image_path=img_rel, latent_path=lat_rel)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]

    results, lines, failures = [], [], []
    for (c, i), req, out in outcomes:
        if isinstance(out, Exception):
            failures.append({"category": c, "level": level.label, "seed": req.seed, "item": i,
                             "backend_id": backend.backend_id, "error": str(out)})
            continue
        results.append(out)
        lines.append(generation_line(out))
    write_jsonl(root / subdir / GENERATION_MANIFEST, lines)
    fail_path = root / subdir / GENERATION_FAILURES
    if failures:
        write_jsonl(fail_path, failures)
        raise BackendFailure(f"{len(failures)} of {len(jobs)} items failed", failures=failures, results=results)
    if fail_path.exists():
        fail_path.unlink()
    return results


def generation_line(result: GenerationResult) -> dict:
    return {
        "category": result.request.category,
        "level": result.request.level.label,
        "seed": result.request.seed,
        "image_path": result.image_path,
        "latent_path": result.latent_path,
        "backend_id": result.backend_id,
        "status": "ok",
    }


def read_generation_manifest(root, subdir: str = SYNTHETIC_DIR) -> list[dict]:
    return read_jsonl(Path(root) / subdir / GENERATION_MANIFEST)


def merge_synthetic(manifest: DatasetManifest, results, level=TaxonomicLevel.SPECIES, root=None) -> DatasetManifest:
    """Append each result as a synthetic Train record; Test membership is untouched.

    ``results`` may be :class:`GenerationResult` objects or generation
    manifest lines (then ``root`` is needed to read image sizes). When the
    category is coarser than species, the synthetic record borrows the taxon
    of the first real train record of that category.
    """
    level = TaxonomicLevel.parse(level)
    if not manifest.is_split:
        raise UnsplitManifest("merge_synthetic needs a split manifest")
    taxa = {}
    for r in manifest.select(Split.TRAIN, Source.REAL) + list(manifest.records):
        taxa.setdefault(r.taxon.at(level), r.taxon)
    new = []
    for res in results:
        if isinstance(res, GenerationResult):
            category, path = res.request.category, res.image_path
            width = height = res.request.image_size
        else:
            category, path = res["category"], res["image_path"]
            width = height = 0
            if root is not None:
                with Image.open(Path(root) / path) as im:
                    width, height = im.size
        if category not in taxa:
            raise KeyError(f"synthetic category {category!r} is not in the manifest")
        if path is None:
            raise ValueError("generation result was not persisted (no image_path)")
        new.append(ImageRecord(
            id=f"syn-{category}-{Path(path).stem}",
            path=path,
            taxon=taxa[category],
            source=Source.SYNTHETIC,
            split=Split.TRAIN,
            width=width,
            height=height,
        ))
    return manifest.with_records(manifest.records + tuple(new))
