"""Detector-guided fusion of a score pyramid.

Each box is assigned the pyramid scale at which its size is closest to the
network's nominal input size. Every base pixel then reads its scores from
the scale chosen by the most confident box containing it.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DetectionBox, ShapeError, bilinear_sample, check_scores, corner_aligned_coords
from .io import read_scores
from .metrics import pixel_accuracy

DEFAULT_SCALES = (1.0, 1.5, 2.0)


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(np.floor(n * scale + 0.5)))


@dataclass
class ScalePyramid:
    scales: list[float]
    score_maps: list[np.ndarray]
    nominal: int = 321

    def __post_init__(self):
        if not self.scales:
            raise ValueError("empty pyramid")
        if len(self.scales) != len(self.score_maps):
            raise ValueError(f"{len(self.scales)} scales but {len(self.score_maps)} score maps")
        if any(s <= 0 for s in self.scales) or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be positive and strictly increasing, got {self.scales}")
        self.score_maps = [check_scores(m) for m in self.score_maps]
        if len({m.shape[2] for m in self.score_maps}) != 1:
            raise ShapeError("pyramid levels disagree on the label count")

    def check_base(self, height: int, width: int):
        for s, m in zip(self.scales, self.score_maps):
            eh, ew = scaled_size(height, s), scaled_size(width, s)
            if abs(m.shape[0] - eh) > 1 or abs(m.shape[1] - ew) > 1:
                raise ShapeError(
                    f"scale {s}: map is {m.shape[:2]}, expected about {(eh, ew)} for base {(height, width)}"
                )

    @classmethod
    def from_manifest(cls, path, nominal: int = 321) -> "ScalePyramid":
        """Load ``scale<TAB>path`` lines; relative paths resolve against the manifest."""
        path = Path(path)
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            scale, map_path = line.split("\t")
            map_path = Path(map_path)
            if not map_path.is_absolute():
                map_path = path.parent / map_path
            entries.append((float(scale), read_scores(map_path)))
        entries.sort(key=lambda e: e[0])
        return cls([s for s, _ in entries], [m for _, m in entries], nominal)


def scale_objective(box: DetectionBox, scale: float, nominal: int) -> float:
    return abs(scale * box.height - nominal) + abs(scale * box.width - nominal)


def optimal_scale(box: DetectionBox, pyramid: ScalePyramid) -> int:
    """Index of the scale bringing the box closest to nominal size; ties pick the smallest scale."""
    if not pyramid.scales:
        raise ValueError("empty pyramid")
    objectives = [scale_objective(box, s, pyramid.nominal) for s in pyramid.scales]
    return int(np.argmin(objectives))


def _fallback_index(pyramid: ScalePyramid) -> int:
    # Uncovered pixels read the original resolution, or the closest scale to it.
    return int(np.argmin([abs(s - 1.0) for s in pyramid.scales]))


def scale_assignment(boxes, height: int, width: int, pyramid: ScalePyramid) -> np.ndarray:
    """Per-pixel pyramid index chosen by the most confident containing box."""
    assign = np.full((height, width), _fallback_index(pyramid), dtype=np.int64)
    best = np.full((height, width), -np.inf)
    for box in boxes:
        if box.x1 < 0 or box.y1 < 0 or box.x0 >= width or box.y0 >= height:
            continue
        # the scale follows the detector's full box; only the painted area is clipped
        inside = box.clamp(height, width)
        sl = (slice(inside.y0, inside.y1 + 1), slice(inside.x0, inside.x1 + 1))
        # strict '>' keeps the earliest box on confidence ties
        better = box.confidence > best[sl]
        best[sl] = np.where(better, box.confidence, best[sl])
        assign[sl] = np.where(better, optimal_scale(box, pyramid), assign[sl])
    return assign


def fuse_scores(pyramid: ScalePyramid, boxes, height: int, width: int) -> np.ndarray:
    """Compose a base-resolution score map from the pyramid under box guidance.

    A base pixel ``(r, c)`` reads level ``s`` bilinearly at the corner-aligned
    position ``(r * (H_s - 1) / (H - 1), c * (W_s - 1) / (W - 1))``.
    """
    pyramid.check_base(height, width)
    assign = scale_assignment(boxes, height, width, pyramid)
    out = np.empty((height, width, pyramid.score_maps[0].shape[2]))
    for idx, m in enumerate(pyramid.score_maps):
        mask = assign == idx
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask)
        src_r = corner_aligned_coords(height, m.shape[0])[rows]
        src_c = corner_aligned_coords(width, m.shape[1])[cols]
        out[rows, cols] = bilinear_sample(m, src_r, src_c)
    return out


def box_union_mask(boxes, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), bool)
    for box in boxes:
        if box.x1 < 0 or box.y1 < 0 or box.x0 >= width or box.y0 >= height:
            continue
        box = box.clamp(height, width)
        mask[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = True
    return mask


def box_pixel_accuracy(pred, gt, boxes) -> float:
    """Pixel accuracy restricted to the union of ``boxes``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = box_union_mask(boxes, *pred.shape)
    if not mask.any():
        raise ValueError("box_pixel_accuracy: boxes cover no pixels")
    return pixel_accuracy(pred, gt, mask)
