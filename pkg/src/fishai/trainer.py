"""Contrastive fine-tuning loop for the toy encoder backend."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .augmentor import latent_path_for
from .dataset import DatasetManifest, Source, Split, load_image
from .errors import ConfigMismatch, MissingDescription, NonFiniteLoss, OutOfRange
from .io import (
    config_hash,
    load_raw,
    read_jsonl,
    sha256_hex,
    stable_hash,
    write_jsonl,
)
from .model import (
    DEFAULT_TAU,
    EMBED_DIM,
    ToyEncoderBackend,
    info_nce_grad,
    load_checkpoint,
    preprocess_image,
    save_checkpoint,
)
from .taxonomy import TaxonomicLevel

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning hyperparameters.

    Defaults are the full-scale schedule (batch 16, lr 1e-4, 5 warmup
    epochs, 100 epochs, decay 0.7, weight decay 0.05). ``decay_period_epochs``
    is the step length of the post-warmup decay. With ``fine_tune=False`` the
    image projection is frozen and only the text and latent projections train.
    """

    batch_size: int = 16
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 100
    lr_decay: float = 0.7
    weight_decay: float = 0.05
    decay_period_epochs: int = 10
    seed: int = 0
    fine_tune: bool = True
    level: str = "species"
    embed_dim: int = EMBED_DIM
    tau: float = DEFAULT_TAU
    learnable_tau: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.base_lr <= 0 or self.decay_period_epochs < 1:
            raise ValueError("batch_size, base_lr and decay_period_epochs must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not 0 < self.lr_decay <= 1 or self.weight_decay < 0 or self.tau <= 0:
            raise ValueError("lr_decay must be in (0, 1], weight_decay >= 0, tau > 0")
        TaxonomicLevel.parse(self.level)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def digest(self) -> str:
        return config_hash(self.to_json())


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    steps = (epoch - config.warmup_epochs) // config.decay_period_epochs
    return config.base_lr * config.lr_decay**steps


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    loss: float
    wall_time_s: float = 0.0

    def key(self) -> tuple:
        """Deterministic part of the entry (wall time excluded)."""
        return (self.epoch, self.lr, self.loss)


@dataclass
class TrainLog:
    entries: list[EpochLog] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.entries]

    def same_run(self, other: "TrainLog") -> bool:
        return [e.key() for e in self.entries] == [e.key() for e in other.entries]

    def save(self, path) -> None:
        write_jsonl(path, [asdict(e) for e in self.entries])

    @classmethod
    def load(cls, path) -> "TrainLog":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls([EpochLog(**row) for row in read_jsonl(path)])


def label_space_hash(categories) -> str:
    return sha256_hex(json.dumps(list(categories)))[:16]


class BatchSampler:
    """Seeded per-epoch batches, each sample once per epoch.

    Every batch draws distinct classes (probability proportional to the
    samples each class still has left) and only repeats a class once fewer
    classes than ``batch_size`` remain.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, seed: int):
        self.labels = np.asarray(labels)
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng(stable_hash("batches", self.seed, epoch))
        classes = np.unique(self.labels)
        queues = {int(c): list(rng.permutation(np.flatnonzero(self.labels == c))) for c in classes}
        batches = []
        while any(queues.values()):
            live = np.array([c for c in sorted(queues) if queues[c]])
            counts = np.array([len(queues[c]) for c in live], dtype=np.float64)
            take = min(self.batch_size, len(live))
            chosen = list(rng.choice(live, size=take, replace=False, p=counts / counts.sum()))
            picks = {int(c): 1 for c in chosen}
            spare = self.batch_size - take
            while spare > 0:
                left = np.array([len(queues[c]) - picks.get(c, 0) for c in live], dtype=np.float64)
                if left.sum() <= 0:
                    break
                c = int(rng.choice(live, p=left / left.sum()))
                picks[c] = picks.get(c, 0) + 1
                spare -= 1
            batch = []
            for c in sorted(picks):
                for _ in range(picks[c]):
                    batch.append(queues[c].pop())
            batches.append(np.array(batch, dtype=np.int64))
        return batches


@dataclass
class TrainingData:
    """Pre-extracted fixed features for every Train record."""

    categories: tuple[str, ...]
    labels: np.ndarray
    f_img: np.ndarray
    f_lat: np.ndarray
    has_latent: np.ndarray
    f_txt: np.ndarray
    record_ids: tuple[str, ...]


def prepare_training_data(manifest: DatasetManifest, descriptions: Mapping[str, str], root, level,
                          backend: ToyEncoderBackend) -> TrainingData:
    level = TaxonomicLevel.parse(level)
    root = Path(root)
    records = manifest.select(Split.TRAIN)
    categories = manifest.label_space(level).categories
    needed = sorted({r.taxon.at(level) for r in records})
    missing = [c for c in needed if not descriptions.get(c)]
    if missing:
        raise MissingDescription(missing)
    index = {c: i for i, c in enumerate(categories)}
    lat_dim = backend.params["lat_proj"].shape[1]
    f_img = np.zeros((len(records), backend.params["img_proj"].shape[1]))
    f_lat = np.zeros((len(records), lat_dim))
    has_lat = np.zeros(len(records), dtype=bool)
    for i, r in enumerate(records):
        f_img[i] = backend.image_features(preprocess_image(load_image(root / r.path)))
        if r.source is Source.SYNTHETIC:
            lp = root / latent_path_for(r.path)
            if lp.exists():
                f_lat[i] = backend.latent_features(load_raw(lp))
                has_lat[i] = True
    # classes absent from train still get a text row so indices match the label space
    f_txt = np.stack([backend.text_features(descriptions.get(c) or c) for c in categories])
    labels = np.array([index[r.taxon.at(level)] for r in records], dtype=np.int64)
    return TrainingData(tuple(categories), labels, f_img, f_lat, has_lat, f_txt, tuple(r.id for r in records))


def batch_step(backend: ToyEncoderBackend, data: TrainingData, idx: np.ndarray):
    """Loss and parameter gradients for one batch.

    Columns are the distinct classes of the batch; each row targets its own
    class column.
    """
    labels = data.labels[idx]
    cols, targets = np.unique(labels, return_inverse=True)
    f_img, f_lat, f_txt = data.f_img[idx], data.f_lat[idx], data.f_txt[cols]
    e, e_norm = backend.project_samples(f_img, f_lat)
    t, t_norm = backend.project_texts(f_txt)
    tau = backend.tau
    S = e @ t.T / tau
    loss, dS = info_nce_grad(S, targets)
    dE = dS @ t / tau
    dT = dS.T @ e / tau
    du = (dE - e * np.sum(dE * e, axis=1, keepdims=True)) / e_norm
    dv = (dT - t * np.sum(dT * t, axis=1, keepdims=True)) / t_norm
    grads = {
        "img_proj": du.T @ f_img,
        "lat_proj": du.T @ f_lat,
        "txt_proj": dv.T @ f_txt,
    }
    d_log_tau = -float(np.sum(dS * S))
    return loss, grads, d_log_tau


class Trainer:
    """Owns one training run: parameters, epoch counter and log."""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest, descriptions: Mapping[str, str], root,
                 backend: ToyEncoderBackend | None = None):
        self.config = config
        self.level = TaxonomicLevel.parse(config.level)
        self.backend = backend or ToyEncoderBackend.initialize(
            config.seed, config.embed_dim, config.tau, config.learnable_tau
        )
        self.data = prepare_training_data(manifest, descriptions, root, self.level, self.backend)
        self.sampler = BatchSampler(self.data.labels, config.batch_size, config.seed)
        self.epoch = 0
        self.log = TrainLog()

    @property
    def label_hash(self) -> str:
        return label_space_hash(self.data.categories)

    @classmethod
    def resume(cls, checkpoint_dir, config: TrainConfig, manifest: DatasetManifest, descriptions, root) -> "Trainer":
        backend, meta = load_checkpoint(checkpoint_dir)
        if meta["D"] != config.embed_dim:
            raise ConfigMismatch(f"checkpoint D={meta['D']} but config embed_dim={config.embed_dim}")
        if meta["config_hash"] != config.digest():
            raise ConfigMismatch(f"checkpoint config hash {meta['config_hash']} != {config.digest()}")
        trainer = cls(config, manifest, descriptions, root, backend)
        if meta.get("label_hash") not in (None, trainer.label_hash):
            raise ConfigMismatch("checkpoint label space differs from the manifest's")
        trainer.epoch = int(meta["step"])
        trainer.log = TrainLog.load(Path(checkpoint_dir) / TRAIN_LOG)
        if len(trainer.log) != trainer.epoch:
            raise ConfigMismatch(f"log has {len(trainer.log)} epochs, checkpoint step is {trainer.epoch}")
        return trainer

    def train_epoch(self) -> EpochLog:
        cfg = self.config
        lr = lr_at(cfg, self.epoch)
        start = time.perf_counter()
        losses = []
        trainable = [n for n in self.backend.params if cfg.fine_tune or n != "img_proj"]
        for idx in self.sampler.epoch(self.epoch):
            loss, grads, d_log_tau = batch_step(self.backend, self.data, idx)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {self.epoch}")
            losses.append(loss)
            for name in trainable:
                p = self.backend.params[name].astype(np.float64)
                p = p - lr * grads[name] - lr * cfg.weight_decay * p
                self.backend.params[name] = p.astype(np.float32)
            if cfg.learnable_tau:
                self.backend.tau = float(np.float32(math.exp(math.log(self.backend.tau) - lr * d_log_tau)))
        entry = EpochLog(self.epoch, lr, float(np.mean(losses)) if losses else 0.0,
                         round(time.perf_counter() - start, 6))
        self.log.entries.append(entry)
        self.epoch += 1
        return entry

    def save(self, checkpoint_dir) -> Path:
        path = save_checkpoint(checkpoint_dir, self.backend, self.epoch, self.config.digest(), {
            "level": self.level.label,
            "label_hash": self.label_hash,
            "categories": list(self.data.categories),
        })
        self.log.save(path / TRAIN_LOG)
        return path

    def _dump_state(self, checkpoint_dir) -> Path:
        dump = Path(checkpoint_dir) / "nonfinite_dump"
        save_checkpoint(dump, self.backend, self.epoch, self.config.digest())
        self.log.save(dump / TRAIN_LOG)
        return dump

    def run(self, checkpoint_dir=None, until: int | None = None) -> TrainLog:
        """Train up to epoch ``until`` (default: ``config.epochs``), checkpointing as configured."""
        stop = self.config.epochs if until is None else min(until, self.config.epochs)
        every = self.config.checkpoint_every
        while self.epoch < stop:
            try:
                entry = self.train_epoch()
            except NonFiniteLoss as exc:
                if checkpoint_dir is not None:
                    exc.dump_path = self._dump_state(checkpoint_dir)
                raise
            log.info("epoch %d lr=%.3g loss=%.4f", entry.epoch, entry.lr, entry.loss)
            if checkpoint_dir is not None and every and self.epoch % every == 0:
                self.save(checkpoint_dir)
        if checkpoint_dir is not None:
            self.save(checkpoint_dir)
        return self.log


def train(config: TrainConfig, manifest: DatasetManifest, descriptions: Mapping[str, str], root,
          checkpoint_dir=None, backend: ToyEncoderBackend | None = None, until: int | None = None):
    """Fine-tune and return ``(backend, TrainLog)``; writes the checkpoint when a directory is given."""
    trainer = Trainer(config, manifest, descriptions, root, backend)
    trainer.run(checkpoint_dir, until)
    return trainer.backend, trainer.log


def resume(checkpoint_dir, config: TrainConfig, manifest: DatasetManifest, descriptions, root,
           until: int | None = None):
    trainer = Trainer.resume(checkpoint_dir, config, manifest, descriptions, root)
    trainer.run(checkpoint_dir, until)
    return trainer.backend, trainer.log
