"""Epoch loop and evaluation over synthetic pairs."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import CLASSES, SamplePair, SyntheticConfig, single_object_images, stack_pairs
from .metrics import jaccard, precision_pixel
from .network import CosegModel, _he_uniform, train_step
from .optim import Adam
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_pairs: int = 4
    lr: float = 1e-3
    seed: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; cosine decays to zero over ``epochs``."""
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


@dataclass
class History:
    epoch_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0


def fit(model: CosegModel, pairs: list[SamplePair], cfg: TrainConfig,
        optimizer: Adam | None = None, on_epoch=None) -> History:
    """Shuffled mini-batch training; ``on_epoch(epoch, mean_loss)`` runs after every epoch."""
    opt = optimizer or Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.state.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_pairs):
            batch = [pairs[i] for i in order[start : start + cfg.batch_pairs]]
            a, b, ma, mb = stack_pairs(batch)
            losses.append(train_step(model, opt, a, b, ma, mb))
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f (%.0fs)", epoch + 1, hist.epoch_loss[-1], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, hist.epoch_loss[-1])
    hist.seconds = time.perf_counter() - t0
    return hist


@dataclass
class PretrainConfig:
    epochs: int = 3
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0


def pretrain_encoder(model: CosegModel, images: np.ndarray, labels: np.ndarray, cfg: PretrainConfig,
                     num_classes: int | None = None) -> list[float]:
    """Train the encoder as a shape classifier before co-segmentation training.

    A linear head over globally pooled features is trained together with the
    encoder and then discarded, the way an ImageNet-initialised backbone
    arrives with semantic channels but no classifier.  Returns per-epoch
    training accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or not len(labels):
        raise ValueError(f"need matching non-empty images and labels, got {len(images)} and {len(labels)}")
    k = int(num_classes or labels.max() + 1)
    c = model.config.channels
    rng = np.random.default_rng(cfg.seed)
    head = {"w": Tensor(_he_uniform(rng, (c, k), c, model.dtype), True),
            "b": Tensor(np.zeros(k, model.dtype), True)}
    enc = {n: p for n, p in model.params.items() if n.startswith("enc.")}
    opt = Adam({**enc, **{f"head.{n}": p for n, p in head.items()}}, lr=cfg.lr)
    model.train()
    accuracy = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        hits = 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            opt.zero_grad()
            pooled = ops.pool_spatial_to_channelvec(model.encode(images[idx]))
            logits = ops.fully_connected(pooled, head["w"], head["b"])
            n = len(idx)
            loss = ops.softmax_cross_entropy(ops.reshape(logits, (n, k, 1, 1)), labels[idx].reshape(n, 1, 1))
            backward(loss)
            opt.step()
            hits += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        accuracy.append(hits / len(labels))
        log.info("pretrain epoch %d accuracy %.3f", epoch + 1, accuracy[-1])
    for p in enc.values():
        p.grad = None
    return accuracy


def pretrain_on_shapes(model: CosegModel, per_class: int = 400, cfg: PretrainConfig | None = None) -> list[float]:
    """Pretrain the encoder on single-shape images of every synthetic class."""
    cfg = cfg or PretrainConfig()
    shapes = single_object_images(SyntheticConfig(canvas=model.config.input_size, seed=cfg.seed), per_class)
    images = np.stack([img for _, img in shapes]).astype(model.dtype, copy=False)
    labels = np.array([CLASSES.index(c) for c, _ in shapes])
    return pretrain_encoder(model, images, labels, cfg, len(CLASSES))


def predict_pairs(model: CosegModel, pairs: list[SamplePair], batch: int = 16):
    masks = []
    for start in range(0, len(pairs), batch):
        a, b, _, _ = stack_pairs(pairs[start : start + batch])
        pa, pb = model.predict_pair(a, b)
        masks.extend(zip(pa, pb))
    return masks


def evaluate(model: CosegModel, pairs: list[SamplePair], batch: int = 16) -> list[tuple[str, float, float]]:
    """(label, jaccard, precision) for every image of every pair."""
    records = []
    for p, (pa, pb) in zip(pairs, predict_pairs(model, pairs, batch)):
        records.append((p.label, jaccard(pa, p.mask_a), precision_pixel(pa, p.mask_a)))
        records.append((p.label, jaccard(pb, p.mask_b), precision_pixel(pb, p.mask_b)))
    return records
