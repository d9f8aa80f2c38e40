"""Segmentation evaluation: IOU, pixel and superpixel accuracy, box PCP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DetectionBox, ShapeError


@dataclass
class IouReport:
    """Per-label IOU; labels absent from both maps hold NaN and are skipped by ``mean``.

    IOU is computed over pixels pooled across every image passed in.
    """

    per_label: np.ndarray
    groups: dict[str, float] = field(default_factory=dict)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.per_label)

    @property
    def mean(self) -> float:
        vals = self.per_label[self.present]
        return float(vals.mean()) if vals.size else float("nan")

    def format(self, names=None) -> str:
        lines = ["# IOU over pooled pixels", "label\tiou"]
        for k, val in enumerate(self.per_label):
            name = names[k] if names else str(k)
            lines.append(f"{name}\t{'absent' if np.isnan(val) else f'{val:.6f}'}")
        for name, val in self.groups.items():
            lines.append(f"{name}\t{val:.6f}")
        lines.append(f"mean_iou={self.mean!r}")
        return "\n".join(lines) + "\n"


def _as_list(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return [np.asarray(m) for m in maps]


def _paired(pred, gt):
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground-truth maps")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    return preds, gts


def iou_report(pred, gt, num_labels: int | None = None, groups: dict | None = None) -> IouReport:
    """Intersection over union per label.

    Args:
        pred, gt: a label map or a sequence of label maps (pixels are pooled).
        groups: optional ``{name: [labels]}`` scored as unions of labels.
    """
    preds, gts = _paired(pred, gt)
    p = np.concatenate([m.ravel() for m in preds]).astype(np.int64)
    g = np.concatenate([m.ravel() for m in gts]).astype(np.int64)
    if num_labels is None:
        num_labels = int(max(p.max(), g.max())) + 1
    if p.max() >= num_labels or g.max() >= num_labels:
        raise ValueError(f"labels out of range for K={num_labels}")
    conf = np.bincount(g * num_labels + p, minlength=num_labels**2).reshape(num_labels, num_labels)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        per_label = np.where(union > 0, inter / union, np.nan)
    group_scores = {}
    for name, members in (groups or {}).items():
        pm, gm = np.isin(p, members), np.isin(g, members)
        u = np.sum(pm | gm)
        group_scores[name] = float(np.sum(pm & gm) / u) if u else float("nan")
    return IouReport(per_label, group_scores)


def pixel_accuracy(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != pred.shape:
        raise ShapeError(f"mask {mask.shape} vs maps {pred.shape}")
    n = mask.sum()
    if n == 0:
        raise ValueError("pixel_accuracy over an empty mask")
    return float(np.sum((pred == gt) & mask) / n)


def _check_superpixels(sp):
    sp = np.asarray(sp)
    n = int(sp.max()) + 1
    counts = np.bincount(sp.ravel(), minlength=n)
    if sp.min() < 0 or np.any(counts == 0):
        raise ValueError("superpixel ids must be contiguous from 0 with no empty superpixel")
    return sp, n


def superpixel_project(pred, sp) -> np.ndarray:
    """Majority label inside each superpixel; ties go to the smaller label."""
    pred = np.asarray(pred)
    sp, n = _check_superpixels(sp)
    if pred.shape != sp.shape:
        raise ShapeError(f"prediction {pred.shape} vs superpixels {sp.shape}")
    k = int(pred.max()) + 1
    hist = np.bincount(sp.ravel() * k + pred.ravel(), minlength=n * k).reshape(n, k)
    return hist.argmax(axis=1)


def superpixel_accuracy(pred, gt_sp_labels, sp) -> float:
    projected = superpixel_project(pred, sp)
    gt_sp_labels = np.asarray(gt_sp_labels)
    if gt_sp_labels.shape != projected.shape:
        raise ValueError(
            f"{gt_sp_labels.size} ground-truth superpixel labels for {projected.size} superpixels"
        )
    return float(np.mean(projected == gt_sp_labels))


class EmptyMaskError(ValueError):
    pass


def mask_to_bbox(labels, target: int) -> DetectionBox:
    """Tightest box around the pixels carrying ``target``."""
    rows, cols = np.nonzero(np.asarray(labels) == target)
    if rows.size == 0:
        raise EmptyMaskError(f"empty mask: label {target} does not occur")
    return DetectionBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()), 1.0, int(target))


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0) + 1
    ih = min(a.y1, b.y1) - max(a.y0, b.y0) + 1
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.area + b.area - inter)


def pcp(pred_boxes, gt_boxes, iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth parts whose predicted box reaches ``iou_threshold``.

    ``pred_boxes[n]`` pairs with ``gt_boxes[n]``; a ``None`` prediction is a miss.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if len(gt_boxes) == 0:
        raise ValueError("pcp needs at least one ground-truth part")
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions for {len(gt_boxes)} parts")
    hits = sum(p is not None and box_iou(p, g) >= iou_threshold for p, g in zip(pred_boxes, gt_boxes))
    return hits / len(gt_boxes)
