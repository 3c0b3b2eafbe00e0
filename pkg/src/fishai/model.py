"""Dual-pathway embeddings, symmetric InfoNCE and prototype classification.

Sample embedding::

    e = normalize(P_img @ f_img(image) + P_lat @ f_lat(latent))

where the latent term is zero for samples without a latent (real photos).
Text embedding is ``normalize(P_txt @ f_txt(description))``. Only the three
projections (and optionally the temperature) are trainable in the toy
backend; the feature extractors are fixed functions.

Checkpoint directory layout::

    metadata.json      {D, tau, backend_id, step, config_hash, ...} sorted keys
    img_proj.bin       raw float blobs, format in fishai.io
    lat_proj.bin
    txt_proj.bin
    train_log.jsonl    written by the trainer
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadShape,
    CorruptCheckpoint,
    DimMismatch,
    EmptyPrototypes,
    EmptyText,
    NonFinite,
    NonSquare,
)
from .io import (
    atomic_write_bytes,
    atomic_write_text,
    decode_raw,
    encode_raw,
    stable_hash,
)

INPUT_SIZE = 224
EMBED_DIM = 512
DEFAULT_TAU = 0.07
PATCH_GRID = 8
LATENT_GRID = 4
TEXT_BUCKETS = 256
PARAM_NAMES = ("img_proj", "lat_proj", "txt_proj")

_TOKEN = re.compile(r"[a-z0-9]+")

Embedding = np.ndarray


def preprocess_image(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Resize an HxWx3 uint8 image to the encoder input size (bilinear)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadShape(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image.astype(np.uint8), "RGB").resize((size, size), Image.BILINEAR))


def image_features(image: np.ndarray) -> np.ndarray:
    """Patch means on an 8x8 grid of the 224x224 input, per channel, centred at 0."""
    image = np.asarray(image)
    if image.shape != (INPUT_SIZE, INPUT_SIZE, 3):
        raise BadShape(f"image must be {INPUT_SIZE}x{INPUT_SIZE}x3, got {image.shape}")
    x = image.astype(np.float64) / 255.0 - 0.5
    p = INPUT_SIZE // PATCH_GRID
    return 4.0 * x.reshape(PATCH_GRID, p, PATCH_GRID, p, 3).mean(axis=(1, 3)).ravel()


def latent_features(latent: np.ndarray, channels: int = 4) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != channels or min(latent.shape[1:]) < LATENT_GRID:
        raise BadShape(f"latent must be {channels}xH'xW' with H', W' >= {LATENT_GRID}, got {latent.shape}")
    if not np.all(np.isfinite(latent)):
        raise NonFinite("latent contains non-finite values")
    rows = np.array_split(latent, LATENT_GRID, axis=1)
    pooled = [[blk.mean(axis=(1, 2)) for blk in np.array_split(r, LATENT_GRID, axis=2)] for r in rows]
    return np.asarray(pooled).transpose(2, 0, 1).ravel()


def text_features(text: str, buckets: int = TEXT_BUCKETS) -> np.ndarray:
    """Signed hashed bag of unigrams and bigrams, L2-normalized."""
    if not text or not text.strip():
        raise EmptyText("description is empty")
    tokens = _TOKEN.findall(text.lower())
    grams = tokens + [a + " " + b for a, b in zip(tokens, tokens[1:])]
    vec = np.zeros(buckets)
    for g in grams:
        h = stable_hash("tok", g)
        vec[h % buckets] += 1.0 if (h >> 32) & 1 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    return u / norms, norms


@dataclass
class ToyEncoderBackend:
    """CPU-trainable encoder backend with fixed feature extractors."""

    params: dict[str, np.ndarray]
    tau: float = DEFAULT_TAU
    learnable_tau: bool = False
    latent_channels: int = 4
    backend_id: str = "toy-encoder-v1"
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, seed: int = 0, dim: int = EMBED_DIM, tau: float = DEFAULT_TAU,
                   learnable_tau: bool = False) -> "ToyEncoderBackend":
        dims = {
            "img_proj": 3 * PATCH_GRID**2,
            "lat_proj": 4 * LATENT_GRID**2,
            "txt_proj": TEXT_BUCKETS,
        }
        params = {}
        for name, fan_in in dims.items():
            rng = np.random.default_rng(stable_hash("init", seed, name))
            params[name] = (rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(dim, fan_in))).astype(np.float32)
        if tau <= 0:
            raise ValueError("temperature must be positive")
        return cls(params, float(tau), learnable_tau)

    @property
    def dim(self) -> int:
        return self.params["img_proj"].shape[0]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # features are fixed functions; kept on the backend so real backends can override them
    def image_features(self, image):
        return image_features(image)

    def latent_features(self, latent):
        return latent_features(latent, self.latent_channels)

    def text_features(self, text):
        return text_features(text, self.params["txt_proj"].shape[1])

    def project_samples(self, f_img: np.ndarray, f_lat: np.ndarray | None = None):
        """Batch forward for samples; returns (embeddings, pre-normalization norms)."""
        u = f_img @ self.params["img_proj"].T.astype(np.float64)
        if f_lat is not None:
            u = u + f_lat @ self.params["lat_proj"].T.astype(np.float64)
        return _normalize_rows(u)

    def project_texts(self, f_txt: np.ndarray):
        return _normalize_rows(f_txt @ self.params["txt_proj"].T.astype(np.float64))

    def copy(self) -> "ToyEncoderBackend":
        return ToyEncoderBackend({k: v.copy() for k, v in self.params.items()}, self.tau, self.learnable_tau,
                                 self.latent_channels, self.backend_id, dict(self.meta))


def embed_sample(backend: ToyEncoderBackend, image: np.ndarray, latent: np.ndarray | None = None) -> Embedding:
    f_img = backend.image_features(image)[None]
    f_lat = None if latent is None else backend.latent_features(latent)[None]
    e, _ = backend.project_samples(f_img, f_lat)
    if not np.all(np.isfinite(e)):
        raise NonFinite("embedding is not finite")
    return e[0]


def embed_text(backend: ToyEncoderBackend, description: str) -> Embedding:
    t, _ = backend.project_texts(backend.text_features(description)[None])
    return t[0]


def embed_texts(backend: ToyEncoderBackend, descriptions: Sequence[str]) -> np.ndarray:
    if len(descriptions) == 0:
        return np.zeros((0, backend.dim))
    feats = np.stack([backend.text_features(d) for d in descriptions])
    return backend.project_texts(feats)[0]


def similarity(image_embs: np.ndarray, text_embs: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Scaled cosine similarity matrix ``S[i, j] = <e_i, t_j> / tau``."""
    a = np.atleast_2d(np.asarray(image_embs, dtype=np.float64))
    b = np.atleast_2d(np.asarray(text_embs, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return (a @ b.T) / tau


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def info_nce_grad(S: np.ndarray, targets: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE loss and its gradient with respect to ``S``.

    Without ``targets`` ``S`` must be square and row ``i`` is paired with
    column ``i``. With ``targets`` (one column index per row) rows sharing a
    class point at the same column; the column-side term then spreads its
    target uniformly over that column's positive rows and skips columns
    without positives.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise NonSquare(f"similarity matrix must be 2-D, got {S.ndim}-D")
    n, m = S.shape
    if targets is None:
        if n != m:
            raise NonSquare(f"similarity matrix is {n}x{m}")
        targets = np.arange(n)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,) or np.any(targets < 0) or np.any(targets >= m):
        raise ValueError("targets must give one valid column per row")
    Y = np.zeros((n, m))
    Y[np.arange(n), targets] = 1.0

    row_lsm = _log_softmax(S, axis=1)
    row_loss = -row_lsm[np.arange(n), targets].mean()
    g_row = (np.exp(row_lsm) - Y) / n

    pos = Y.sum(axis=0)
    cols = pos > 0
    k = int(cols.sum())
    col_target = np.where(cols, Y / np.where(cols, pos, 1.0), 0.0)
    col_lsm = _log_softmax(S, axis=0)
    col_loss = -(col_target * col_lsm)[:, cols].sum() / k
    g_col = np.where(cols, np.exp(col_lsm) - col_target, 0.0) / k

    return 0.5 * (row_loss + col_loss), 0.5 * (g_row + g_col)


def info_nce(S: np.ndarray, targets: Sequence[int] | None = None) -> float:
    return info_nce_grad(S, targets)[0]


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Per-row ranking, descending score, ties broken by lower label index."""
    scores = np.atleast_2d(scores)
    return np.argsort(-scores, axis=1, kind="stable")


def classify(sample_emb: np.ndarray, prototypes: np.ndarray, categories: Sequence[str]) -> list[tuple[str, float]]:
    """Rank every category by cosine similarity to ``sample_emb``."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.size == 0 or len(categories) == 0:
        raise EmptyPrototypes("no class prototypes")
    if prototypes.ndim != 2 or prototypes.shape[0] != len(categories):
        raise DimMismatch("need exactly one prototype per category")
    sample_emb = np.asarray(sample_emb, dtype=np.float64)
    if sample_emb.shape != (prototypes.shape[1],):
        raise DimMismatch(f"sample dim {sample_emb.shape} vs prototype dim {prototypes.shape[1]}")
    scores = prototypes @ sample_emb
    order = rank_scores(scores)[0]
    return [(categories[j], float(scores[j])) for j in order]


def save_checkpoint(path, backend: ToyEncoderBackend, step: int, config_hash: str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "D": backend.dim,
        "tau": float(backend.tau),
        "learnable_tau": bool(backend.learnable_tau),
        "backend_id": backend.backend_id,
        "step": int(step),
        "config_hash": config_hash,
        "params": {k: list(v.shape) for k, v in sorted(backend.params.items())},
    }
    meta.update(extra or {})
    for name in PARAM_NAMES:
        atomic_write_bytes(path / f"{name}.bin", encode_raw(backend.params[name]))
    atomic_write_text(path / "metadata.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path


def load_checkpoint(path) -> tuple[ToyEncoderBackend, dict]:
    path = Path(path)
    try:
        meta = json.loads((path / "metadata.json").read_text(encoding="utf-8"))
        params = {}
        for name in PARAM_NAMES:
            arr = decode_raw((path / f"{name}.bin").read_bytes())[0]
            if list(arr.shape) != meta["params"][name]:
                raise CorruptCheckpoint(f"{name} has shape {arr.shape}, metadata says {meta['params'][name]}")
            params[name] = arr
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint at {path}: {exc}") from exc
    if any(p.shape[0] != meta["D"] for p in params.values()):
        raise CorruptCheckpoint("parameter rows disagree with D")
    if meta.get("backend_id") != "toy-encoder-v1":
        raise CorruptCheckpoint(f"unsupported encoder backend {meta.get('backend_id')!r}")
    backend = ToyEncoderBackend(params, meta["tau"], meta.get("learnable_tau", False), backend_id=meta["backend_id"],
                                meta=meta)
    return backend, meta
