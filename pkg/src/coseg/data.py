"""Synthetic co-segmentation data.

Each shape family is one semantic class.  A pair shares one class (the
foreground in both masks); every image also carries distractor shapes of
other classes that stay background.  Instances of the shared class differ
in position, scale and colour, and the background is seeded texture.
Pixel values are quantised to 8 bits at generation time so the in-memory
dataset and its PPM/PGM copy on disk are identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imageio import load_image, load_mask, save_image, save_mask

CLASSES = ("disk", "square", "triangle", "cross", "ring")
PAIRINGS = ("chain", "independent")


@dataclass(frozen=True)
class SyntheticConfig:
    canvas: int = 64
    classes: tuple[str, ...] = CLASSES
    holdout: str | None = "cross"
    instances_per_class: int = 1
    distractors: int = 1
    size_range: tuple[int, int] = (16, 26)
    noise: float = 0.04
    texture: float = 0.12
    train_pairs: int = 400
    val_pairs: int = 40
    test_pairs: int = 100
    unseen_pairs: int = 40
    pairing: str = "chain"
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("co-segmentation needs at least two classes")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}; available: {CLASSES}")
        if self.holdout is not None and self.holdout not in self.classes:
            raise ValueError(f"held-out class {self.holdout!r} is not in the class inventory")
        if len(self.seen_classes) < 1 + min(self.distractors, 1):
            raise ValueError("too few seen classes for a shared class plus distractors")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if self.pairing == "chain" and self.distractors and len(self.seen_classes) < 3:
            raise ValueError("chained pairing needs at least three seen classes")
        lo, hi = self.size_range
        if not 4 <= lo <= hi:
            raise ValueError(f"invalid size range {self.size_range}")
        objects = self.instances_per_class + self.distractors
        if (hi + 4) * math.ceil(math.sqrt(objects)) > self.canvas:
            raise ValueError(
                f"canvas {self.canvas} is too small for {objects} shapes of size up to {hi}"
            )

    @property
    def seen_classes(self) -> tuple[str, ...]:
        return tuple(c for c in self.classes if c != self.holdout)


@dataclass
class SamplePair:
    image_a: np.ndarray
    image_b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    label: str
    pair_id: str = ""


@dataclass
class PairSet:
    config: SyntheticConfig
    splits: dict[str, list[SamplePair]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[SamplePair]:
        return self.splits[split]


# ---------------------------------------------------------------------------
# rasterisation


def shape_mask(kind: str, canvas: int, cy: float, cx: float, size: float) -> np.ndarray:
    """Boolean mask of one shape whose bounding box has side ``size``."""
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    dy, dx = yy - cy, xx - cx
    r = size / 2
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    if kind == "square":
        h = 0.85 * r
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if kind == "cross":
        arm = size / 6
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape class {kind!r}")


def _background(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    n = cfg.canvas
    base = rng.uniform(0.25, 0.75) + rng.uniform(-0.08, 0.08, size=(3, 1, 1))
    coarse = rng.standard_normal((3, n // 8, n // 8))
    smooth = coarse.repeat(8, axis=1).repeat(8, axis=2)
    smooth = (smooth + np.roll(smooth, 4, axis=1) + np.roll(smooth, 4, axis=2) + np.roll(smooth, 4, axis=(1, 2))) / 4
    return base + cfg.texture * smooth + cfg.noise * rng.standard_normal((3, n, n))


def _object_colour(rng: np.random.Generator, bg_mean: np.ndarray) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0, 1, size=3)
        if np.abs(c - bg_mean).max() > 0.35:
            return c
    return 1.0 - bg_mean


def _place(rng: np.random.Generator, cfg: SyntheticConfig, sizes: list[int]) -> list[tuple[float, float]]:
    n = cfg.canvas
    for _ in range(200):
        centres, ok = [], True
        for s in sizes:
            lo, hi = s / 2 + 1, n - s / 2 - 1
            c = (rng.uniform(lo, hi), rng.uniform(lo, hi))
            for (py, px), ps in zip(centres, sizes):
                gap = (s + ps) / 2 + 2
                if abs(c[0] - py) < gap and abs(c[1] - px) < gap:
                    ok = False
                    break
            if not ok:
                break
            centres.append(c)
        if ok:
            return centres
    raise ValueError(f"could not place {len(sizes)} non-overlapping shapes on a {n}x{n} canvas")


def render_scene(rng: np.random.Generator, cfg: SyntheticConfig,
                 kinds: list[str]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Draw one image holding ``kinds``; returns the image and one mask per shape."""
    img = _background(rng, cfg)
    bg_mean = img.mean(axis=(1, 2))
    sizes = [int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1)) for _ in kinds]
    centres = _place(rng, cfg, sizes)
    masks = []
    for kind, size, (cy, cx) in zip(kinds, sizes, centres):
        m = shape_mask(kind, cfg.canvas, cy, cx, size)
        colour = _object_colour(rng, bg_mean)
        shade = colour[:, None, None] + cfg.noise * rng.standard_normal(img.shape)
        img = np.where(m[None], shade, img)
        masks.append(m)
    img = np.rint(np.clip(img, 0, 1) * 255).astype(np.float32) / np.float32(255)
    return img, masks


def _union(masks: list[np.ndarray], canvas: int) -> np.ndarray:
    out = np.zeros((canvas, canvas), dtype=np.uint8)
    for m in masks:
        out |= m.astype(np.uint8)
    return out


def render_image(rng: np.random.Generator, cfg: SyntheticConfig, foreground: list[str],
                 distractors: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image; the mask covers only the ``foreground`` instances."""
    img, masks = render_scene(rng, cfg, list(foreground) + list(distractors))
    return img, _union(masks[: len(foreground)], cfg.canvas)


# ---------------------------------------------------------------------------
# pairs, splits, groups


def _distractor_classes(rng, pool: list[str], count: int, avoid: set[str]) -> list[str]:
    options = [c for c in pool if c not in avoid] or pool
    return [options[int(rng.integers(len(options)))] for _ in range(count)]


def make_pair(rng: np.random.Generator, cfg: SyntheticConfig, label: str,
              distractor_pool: tuple[str, ...], pair_id: str = "") -> SamplePair:
    pool = [c for c in distractor_pool if c != label]
    da = _distractor_classes(rng, pool, cfg.distractors, set())
    db = _distractor_classes(rng, pool, cfg.distractors, set(da))
    fg = [label] * cfg.instances_per_class
    img_a, mask_a = render_image(rng, cfg, fg, da)
    img_b, mask_b = render_image(rng, cfg, fg, db)
    return SamplePair(img_a, img_b, mask_a, mask_b, label, pair_id)


def chain_pairs(rng: np.random.Generator, cfg: SyntheticConfig, count: int,
                classes: tuple[str, ...], prefix: str = "train") -> list[SamplePair]:
    """``count`` pairs over ``count + 1`` images where consecutive images share one class.

    Image i holds classes c_i and c_(i+1); pair (i, i+1) co-segments c_(i+1).
    Any three consecutive classes differ, so each pair shares exactly one
    class and each interior image is foreground for a different class in each
    of its two pairs.  The target of an image therefore depends on its partner.
    """
    seq = [classes[int(rng.integers(len(classes)))]]
    while len(seq) < count + 2:
        options = [c for c in classes if c not in seq[-2:]]
        seq.append(options[int(rng.integers(len(options)))])
    k, extra = cfg.instances_per_class, cfg.distractors - 1
    scenes = []
    for i in range(count + 1):
        avoid = set(seq[max(i - 1, 0) : i + 3])
        kinds = [seq[i]] * k + [seq[i + 1]] * k + _distractor_classes(rng, list(classes), extra, avoid)
        img, masks = render_scene(rng, cfg, kinds)
        scenes.append((img, masks))
    pairs = []
    for i in range(count):
        (img_a, ma), (img_b, mb) = scenes[i], scenes[i + 1]
        # shared class is the second group in image i and the first in image i+1
        pairs.append(SamplePair(img_a, img_b, _union(ma[k : 2 * k], cfg.canvas), _union(mb[:k], cfg.canvas),
                                seq[i + 1], f"{prefix}-{i:05d}"))
    return pairs


def gen_synthetic_pairset(cfg: SyntheticConfig | None = None) -> PairSet:
    """Seeded train/val/test pairs; the held-out class only appears in test.

    With ``pairing="chain"`` the training split reuses each image in two pairs
    with different shared classes; evaluation splits always use fresh,
    independent pairs.
    """
    cfg = cfg or SyntheticConfig()
    seen = cfg.seen_classes
    out = PairSet(cfg)
    plan = [("train", cfg.train_pairs, seen), ("val", cfg.val_pairs, seen), ("test", cfg.test_pairs, seen)]
    for split_idx, (split, count, labels) in enumerate(plan):
        rng = np.random.default_rng([cfg.seed, split_idx])
        if split == "train" and cfg.pairing == "chain" and cfg.distractors and count:
            out.splits[split] = chain_pairs(rng, cfg, count, seen, split)
            continue
        pairs = []
        for i in range(count):
            label = labels[i % len(labels)]
            pairs.append(make_pair(rng, cfg, label, seen, f"{split}-{i:05d}"))
        out.splits[split] = pairs
    if cfg.holdout is not None and cfg.unseen_pairs:
        rng = np.random.default_rng([cfg.seed, len(plan)])
        out.splits["test"] += [
            make_pair(rng, cfg, cfg.holdout, seen, f"unseen-{i:05d}") for i in range(cfg.unseen_pairs)
        ]
    return out


def make_group(cfg: SyntheticConfig, label: str, with_class: int, without_class: int,
               seed: int = 0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """A group where ``with_class`` images contain ``label`` and the rest only distractors.

    Distractor classes rotate through the other seen classes so no distractor
    is as frequent as the shared class.
    """
    rng = np.random.default_rng([cfg.seed, 1000 + seed])
    others = [c for c in cfg.seen_classes if c != label]
    images, masks = [], []
    for i in range(with_class + without_class):
        d = [others[(i + j) % len(others)] for j in range(cfg.distractors)]
        if i < with_class:
            img, m = render_image(rng, cfg, [label] * cfg.instances_per_class, d)
        else:
            extra = [others[(i + cfg.distractors + j) % len(others)] for j in range(cfg.instances_per_class)]
            img, _ = render_image(rng, cfg, [], d + extra)
            m = np.zeros((cfg.canvas, cfg.canvas), dtype=np.uint8)
        images.append(img)
        masks.append(m)
    return images, masks


def single_object_images(cfg: SyntheticConfig, per_class: int, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Images holding exactly one shape each, for attention diagnostics."""
    rng = np.random.default_rng([cfg.seed, 2000 + seed])
    out = []
    for label in cfg.classes:
        for _ in range(per_class):
            img, _ = render_image(rng, replace(cfg, distractors=0), [label], [])
            out.append((label, img))
    return out


# ---------------------------------------------------------------------------
# disk layout: <root>/<split>/<class>/<pair-id>/{a.ppm, b.ppm, a_mask.pgm, b_mask.pgm}

MANIFEST = "manifest.txt"


def write_pairset(pairs: PairSet, root: str | Path) -> Path:
    root = Path(root)
    lines = ["# split\tclass\tpair_id\tseen"]
    seen = set(pairs.config.seen_classes)
    for split, items in pairs.splits.items():
        for p in items:
            d = root / split / p.label / p.pair_id
            d.mkdir(parents=True, exist_ok=True)
            save_image(p.image_a, d / "a.ppm")
            save_image(p.image_b, d / "b.ppm")
            save_mask(p.mask_a, d / "a_mask.pgm")
            save_mask(p.mask_b, d / "b_mask.pgm")
            lines.append(f"{split}\t{p.label}\t{p.pair_id}\t{'seen' if p.label in seen else 'unseen'}")
    manifest = root / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(root: str | Path) -> list[tuple[str, str, str, bool]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields, got {len(parts)}")
        rows.append((parts[0], parts[1], parts[2], parts[3] == "seen"))
    return rows


def load_split(root: str | Path, split: str) -> list[SamplePair]:
    root = Path(root)
    out = []
    for s, label, pid, _ in read_manifest(root):
        if s != split:
            continue
        d = root / s / label / pid
        out.append(SamplePair(load_image(d / "a.ppm"), load_image(d / "b.ppm"),
                              load_mask(d / "a_mask.pgm"), load_mask(d / "b_mask.pgm"), label, pid))
    return out


def tree_digest(root: str | Path) -> str:
    """SHA-256 over every file path and content below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def stack_pairs(pairs: list[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([p.image_a for p in pairs]), np.stack([p.image_b for p in pairs]),
            np.stack([p.mask_a for p in pairs]), np.stack([p.mask_b for p in pairs]))
