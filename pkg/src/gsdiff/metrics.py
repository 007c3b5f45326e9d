"""Pixel metrics, connected components, bounding rectangles and box matching.

Empty-mask conventions (never hit by ordinary evaluation, pinned for
degenerate inputs): an empty prediction scores precision 1 against an empty
ground truth and 0 otherwise, symmetrically for recall; IoU of two empty
masks is 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .segmentation import ContractViolation


@dataclass
class PixelMetrics:
    precision: float
    recall: float
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel extents, x = column, y = row."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)


def pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> PixelMetrics:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))

    precision = tp / (tp + fp) if tp + fp > 0 else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn > 0 else (1.0 if fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn > 0 else 1.0
    return PixelMetrics(precision=precision, recall=recall, f1=f1, iou=iou, tp=tp, fp=fp, fn=fn)


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components as (k, 2) arrays of (row, col) pixel coords.

    Ordered by each component's top-left pixel (lexicographic row, col).
    """
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    comps = []
    for lab in range(1, count + 1):
        rows, cols = np.nonzero(labels == lab)
        order = np.lexsort((cols, rows))
        comps.append(np.stack([rows[order], cols[order]], axis=1))
    comps.sort(key=lambda c: (int(c[0, 0]), int(c[0, 1])))
    return comps


def min_bounding_rect(component: np.ndarray) -> BBox:
    component = np.asarray(component)
    if component.size == 0:
        raise ValueError("cannot bound an empty component")
    rows = component[:, 0]
    cols = component[:, 1]
    return BBox(
        x_min=int(cols.min()), y_min=int(rows.min()), x_max=int(cols.max()), y_max=int(rows.max())
    )


def box_iou(a: BBox, b: BBox) -> float:
    ix0 = max(a.x_min, b.x_min)
    iy0 = max(a.y_min, b.y_min)
    ix1 = min(a.x_max, b.x_max)
    iy1 = min(a.y_max, b.y_max)
    if ix0 > ix1 or iy0 > iy1:
        return 0.0
    inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    return inter / (a.area + b.area - inter)


@dataclass
class MatchReport:
    matches: list[tuple[int, int, float]]  # (pred index, gt index, IoU)
    unmatched_pred: list[int]  # false alarms
    unmatched_gt: list[int]  # misses


def match_boxes(preds: list[BBox], gts: list[BBox], iou_thresh: float = 0.5) -> MatchReport:
    """Greedy highest-IoU-first matching; each box participates at most once."""
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou = box_iou(p, g)
            if iou >= iou_thresh:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches = []
    for iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, iou))
    return MatchReport(
        matches=matches,
        unmatched_pred=[i for i in range(len(preds)) if i not in used_p],
        unmatched_gt=[j for j in range(len(gts)) if j not in used_g],
    )


# ---------------------------------------------------------------------------
# Report output: CSV rows per view plus two aggregates (mean of per-view
# metrics and metrics of the pooled pixel counts).

METRIC_FIELDS = ["view", "precision", "recall", "f1", "iou", "tp", "fp", "fn"]


def aggregate_rows(per_view: list[PixelMetrics]) -> list[dict]:
    rows = [
        {
            "view": str(i),
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "iou": m.iou,
            "tp": m.tp,
            "fp": m.fp,
            "fn": m.fn,
        }
        for i, m in enumerate(per_view)
    ]
    if per_view:
        rows.append(
            {
                "view": "mean_per_view",
                "precision": float(np.mean([m.precision for m in per_view])),
                "recall": float(np.mean([m.recall for m in per_view])),
                "f1": float(np.mean([m.f1 for m in per_view])),
                "iou": float(np.mean([m.iou for m in per_view])),
                "tp": sum(m.tp for m in per_view),
                "fp": sum(m.fp for m in per_view),
                "fn": sum(m.fn for m in per_view),
            }
        )
        tp = sum(m.tp for m in per_view)
        fp = sum(m.fp for m in per_view)
        fn = sum(m.fn for m in per_view)
        precision = tp / (tp + fp) if tp + fp > 0 else (1.0 if fn == 0 else 0.0)
        recall = tp / (tp + fn) if tp + fn > 0 else (1.0 if fp == 0 else 0.0)
        rows.append(
            {
                "view": "pooled",
                "precision": precision,
                "recall": recall,
                "f1": 2 * precision * recall / (precision + recall)
                if precision + recall > 0
                else 0.0,
                "iou": tp / (tp + fp + fn) if tp + fp + fn > 0 else 1.0,
                "tp": tp,
                "fp": fp,
                "fn": fn,
            }
        )
    return rows


def metrics_csv(per_view: list[PixelMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS)
    writer.writeheader()
    for row in aggregate_rows(per_view):
        out = dict(row)
        for key in ("precision", "recall", "f1", "iou"):
            out[key] = f"{row[key]:.6f}"
        writer.writerow(out)
    return buf.getvalue()


def metrics_table(per_view: list[PixelMetrics]) -> str:
    rows = aggregate_rows(per_view)
    header = f"{'view':>14} {'P':>8} {'R':>8} {'F1':>8} {'IoU':>8} {'tp':>7} {'fp':>7} {'fn':>7}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['view']:>14} {row['precision']:>8.4f} {row['recall']:>8.4f} "
            f"{row['f1']:>8.4f} {row['iou']:>8.4f} {row['tp']:>7d} {row['fp']:>7d} {row['fn']:>7d}"
        )
    return "\n".join(lines)
