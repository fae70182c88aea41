"""Foreground Jaccard and pixel precision for binary masks."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable

import numpy as np


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {g.shape}")
    return p, g


def jaccard(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; 1.0 when both are empty."""
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def precision_pixel(pred, gt) -> float:
    """Fraction of pixels whose label (foreground or background) is correct."""
    p, g = _pair(pred, gt)
    if p.size == 0:
        return 1.0
    return np.count_nonzero(p == g) / p.size


def report_rows(records: Iterable[tuple[str, float, float]]) -> list[tuple[str, float, float, int]]:
    """Group (label, jaccard, precision) records into per-label means plus a final 'mean' row."""
    by = defaultdict(list)
    for label, j, p in records:
        by[label].append((j, p))
    rows = []
    for label in sorted(by):
        vals = np.array(by[label])
        rows.append((label, float(vals[:, 0].mean()), float(vals[:, 1].mean()), len(vals)))
    if rows:
        allv = np.array([v for vs in by.values() for v in vs])
        rows.append(("mean", float(allv[:, 0].mean()), float(allv[:, 1].mean()), len(allv)))
    return rows


def format_report(rows, delimiter: str = "\t") -> str:
    out = [delimiter.join(("class", "jaccard", "precision", "count"))]
    for label, j, p, n in rows:
        out.append(delimiter.join((label, f"{j:.4f}", f"{p:.4f}", str(n))))
    return "\n".join(out) + "\n"
