"""Segmentation and detection metrics for small-target masks.

Conventions:

* mIoU is accumulated over the dataset: total intersection over total union.
* A ground-truth target is detected when a predicted component's centroid
  lies within ``match_dist`` pixels of its centroid (greedy one-to-one
  matching, nearest pairs first).
* Fa counts pixels of unmatched predicted components over all pixels.
* ROC is pixel-level TPR against FPR; a pixel is positive when its
  probability is strictly greater than the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class Component:
    pixels: np.ndarray  # [k, 2] (row, col)
    centroid: Tuple[float, float]

    @property
    def area(self) -> int:
        return len(self.pixels)


def connected_components(mask) -> List[Component]:
    """8-connected components in raster order of their first pixel."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got dims {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    labels, n = ndimage.label(mask.astype(bool), structure=_EIGHT)
    comps = []
    for k in range(1, n + 1):
        pix = np.argwhere(labels == k)
        comps.append(Component(pix, (float(pix[:, 0].mean()), float(pix[:, 1].mean()))))
    return comps


def _pairs(preds, gts):
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction dims {np.shape(p)} != ground-truth dims {np.shape(g)}")
    return preds, gts


def iou_counts(preds, gts) -> Tuple[int, int]:
    preds, gts = _pairs(preds, gts)
    inter = union = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p, bool), np.asarray(g, bool)
        inter += int((p & g).sum())
        union += int((p | g).sum())
    return inter, union


def miou(preds, gts) -> float:
    inter, union = iou_counts(preds, gts)
    return 1.0 if union == 0 else inter / union


def pd_fa(preds, gts, match_dist: float = 3.0) -> Tuple[float, float]:
    preds, gts = _pairs(preds, gts)
    detected = total_gt = false_px = total_px = 0
    for p, g in zip(preds, gts):
        pc = connected_components(np.asarray(p, dtype=np.uint8))
        gc = connected_components(np.asarray(g, dtype=np.uint8))
        total_gt += len(gc)
        total_px += int(np.size(g))
        cands = []
        for i, a in enumerate(gc):
            for j, b in enumerate(pc):
                dist = float(np.hypot(a.centroid[0] - b.centroid[0], a.centroid[1] - b.centroid[1]))
                if dist <= match_dist:
                    cands.append((dist, i, j))
        cands.sort()
        used_g, used_p = set(), set()
        for _, i, j in cands:
            if i not in used_g and j not in used_p:
                used_g.add(i)
                used_p.add(j)
        detected += len(used_g)
        false_px += sum(b.area for j, b in enumerate(pc) if j not in used_p)
    pd = detected / total_gt if total_gt else 1.0
    fa = false_px / total_px if total_px else 0.0
    return pd, fa


def roc_auc(prob_maps, gts, thresholds: Sequence[float]) -> Tuple[List[Tuple[float, float]], float]:
    """ROC points (fpr, tpr) closed with (0,0) and (1,1), and their trapezoid area."""
    probs, gts = _pairs(prob_maps, gts)
    th = np.asarray(thresholds, dtype=np.float64)
    if th.ndim != 1 or len(th) == 0:
        raise ValueError("thresholds must be a non-empty list")
    if np.any(np.diff(th) >= 0):
        raise ValueError("thresholds must be strictly descending")
    p = np.concatenate([np.asarray(x, np.float64).ravel() for x in probs])
    g = np.concatenate([np.asarray(x).ravel() for x in gts]).astype(bool)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pos, neg = int(g.sum()), int((~g).sum())
    pts = []
    for t in th:
        hit = p > t
        tp = int((hit & g).sum())
        fp = int((hit & ~g).sum())
        pts.append((fp / neg if neg else 0.0, tp / pos if pos else 0.0))
    pts = [(0.0, 0.0)] + sorted(pts) + [(1.0, 1.0)]
    return pts, trapezoid(pts)


def trapezoid(points: Sequence[Tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.95, 0.05, 19), 10))


@dataclass
class MetricsReport:
    miou: float
    pd: float
    fa: float
    auc: float
    threshold: float
    roc_points: List[Tuple[float, float]] = field(default_factory=list)

    def lines(self) -> List[str]:
        return [
            f"miou={self.miou:.6f}",
            f"pd={self.pd:.6f}",
            f"fa={self.fa:.9e}",
            f"fa_1e-6={self.fa * 1e6:.4f}",
            f"auc={self.auc:.6f}",
            f"threshold={self.threshold:g}",
        ]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    @staticmethod
    def parse(text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = float(v)
        return out


def evaluate(prob_maps, gts, threshold: float = 0.5, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             match_dist: float = 3.0) -> MetricsReport:
    probs, gts = _pairs(prob_maps, gts)
    preds = [np.asarray(p) > threshold for p in probs]
    gts = [np.asarray(g) > 0.5 for g in gts]
    pd, fa = pd_fa(preds, gts, match_dist)
    pts, auc = roc_auc(probs, gts, thresholds)
    return MetricsReport(miou(preds, gts), pd, fa, auc, threshold, pts)
