"""Instant group co-segmentation and the quadratic pairwise baseline.

Instant mode runs the attention branch once per image, reduces the attention
vectors to one group selector (channelwise mean or minimum), then segments
each image once with that selector.  The pairwise baseline runs the pair
network on every unordered pair and majority-votes the per-pair masks.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .attention import joint_selector, fuse_attention, spatial_attention
from .network import CosegModel, logits_to_mask
from .tensor import Tensor, no_grad

MODES = ("average", "minimum")


@dataclass
class GroupAttention:
    values: np.ndarray
    mode: str
    count: int


@dataclass
class GroupResult:
    masks: list[np.ndarray]
    attentions: list[np.ndarray]
    counters: Counter = field(default_factory=Counter)
    seconds: float = 0.0
    group_attention: GroupAttention | None = None


def _eval_model(model: CosegModel) -> None:
    if model.training:
        model.eval()


def generate_attention(image, model: CosegModel) -> tuple[np.ndarray, Tensor]:
    """Channel attention of one image plus the encoder feature it came from."""
    _eval_model(model)
    with no_grad():
        f = model.encode(image)
        alpha = model.channel_attention(f)
    return alpha.data[0], f


def reduce_attentions(alphas: Sequence[np.ndarray], mode: str = "average") -> GroupAttention:
    if not len(alphas):
        raise ValueError("cannot reduce an empty list of attention vectors")
    lengths = {np.shape(a) for a in alphas}
    if len(lengths) != 1:
        raise ValueError(f"attention vectors differ in shape: {sorted(lengths)}")
    stack = np.stack([np.asarray(a) for a in alphas])
    if mode == "average":
        values = stack.mean(axis=0)
    elif mode == "minimum":
        values = stack.min(axis=0)
    else:
        raise ValueError(f"reduction mode must be one of {MODES}, got {mode!r}")
    return GroupAttention(values, mode, len(alphas))


def _selector(group: GroupAttention | np.ndarray, model: CosegModel) -> Tensor:
    values = group.values if isinstance(group, GroupAttention) else np.asarray(group)
    c = model.config.channels
    if values.shape != (c,):
        raise ValueError(f"group attention has shape {values.shape}, model expects ({c},)")
    alpha = Tensor(values.astype(model.dtype, copy=False)[None])
    if model.config.variant == "fca":
        # a pair feeds alpha_a + alpha_b to the fusion layer; a group feeds twice its reduced selector
        alpha = fuse_attention(alpha, alpha, model.attention_params)
    return alpha


def segment_with_attention(image, group: GroupAttention | np.ndarray, model: CosegModel,
                           feature: Tensor | None = None) -> np.ndarray:
    """Segment one image with an externally supplied channel selector.

    ``feature`` short-circuits the encoder when the caller already has it.
    """
    _eval_model(model)
    with no_grad():
        alpha = _selector(group, model)
        f = model.encode(image) if feature is None else feature
        if model.config.variant == "csa":
            attended = ops.broadcast_mul(joint_selector(alpha, spatial_attention(f)), f)
        else:
            attended = ops.broadcast_mul(alpha, f)
        logits = model.decode(attended)
    return logits_to_mask(logits)[0]


def instant_group_coseg(images: Sequence[np.ndarray], model: CosegModel, mode: str = "average",
                        cache_features: bool = True) -> GroupResult:
    """Linear-time group co-segmentation: N attention passes, one reduction, N segmentations."""
    if not len(images):
        raise ValueError("group co-segmentation needs at least one image")
    if mode not in MODES:
        raise ValueError(f"reduction mode must be one of {MODES}, got {mode!r}")
    counters: Counter = Counter()
    t0 = time.perf_counter()
    alphas, feats = [], []
    for img in images:
        alpha, f = generate_attention(img, model)
        counters["encoder"] += 1
        counters["attention"] += 1
        alphas.append(alpha)
        feats.append(f if cache_features else None)
    group = reduce_attentions(alphas, mode)
    counters["reduction"] += 1
    masks = []
    for img, f in zip(images, feats):
        if f is None:
            counters["encoder"] += 1
        masks.append(segment_with_attention(img, group, model, feature=f))
        counters["decoder"] += 1
    return GroupResult(masks, alphas, counters, time.perf_counter() - t0, group)


def pairwise_group_coseg(images: Sequence[np.ndarray], model: CosegModel) -> GroupResult:
    """Run the pair network on all N(N-1)/2 pairs; each image keeps its per-pixel majority vote."""
    n = len(images)
    if n < 2:
        raise ValueError(f"pairwise co-segmentation needs at least 2 images, got {n}")
    counters: Counter = Counter()
    t0 = time.perf_counter()
    votes = [np.zeros(np.shape(images[0])[-2:], dtype=np.int64) for _ in range(n)]
    alphas: list[np.ndarray | None] = [None] * n
    _eval_model(model)
    for i, j in combinations(range(n), 2):
        with no_grad():
            la, lb, att = model.forward_pair(images[i], images[j], return_attention=True)
        votes[i] += logits_to_mask(la)[0]
        votes[j] += logits_to_mask(lb)[0]
        alphas[i], alphas[j] = att.alpha_a.data[0], att.alpha_b.data[0]
        counters["encoder"] += 2
        counters["attention"] += 2
        counters["decoder"] += 2
    # ties go to foreground
    masks = [(2 * v >= n - 1).astype(np.uint8) for v in votes]
    return GroupResult(masks, alphas, counters, time.perf_counter() - t0)


def write_attention_export(path: str | Path, names: Sequence[str], alphas: Sequence[np.ndarray]) -> None:
    """One line per image: ``<path>\\t<v1>,<v2>,...``."""
    lines = [f"{name}\t" + ",".join(f"{v:.8g}" for v in np.asarray(a).ravel()) for name, a in zip(names, alphas)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_attention_export(path: str | Path) -> tuple[list[str], np.ndarray]:
    names, rows = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, _, vals = line.rpartition("\t")
        names.append(name)
        rows.append([float(v) for v in vals.split(",")])
    return names, np.array(rows)
