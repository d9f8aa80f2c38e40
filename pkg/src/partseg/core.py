"""Shared array conventions and primitives.

Score maps are float arrays of shape ``(H, W, K)`` holding pre-softmax
category scores, stored row-major with the label axis innermost. Label maps
are integer arrays of shape ``(H, W)``; the label count ``K`` travels
alongside them where it matters (file I/O, metrics).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent."""


@dataclass(frozen=True)
class DetectionBox:
    """Axis-aligned box with inclusive pixel coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float = 1.0
    label: int = 0

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"degenerate box {self}")
        if not np.isfinite(self.confidence):
            raise ValueError(f"non-finite box confidence {self.confidence}")

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, row, col):
        return (self.y0 <= row) & (row <= self.y1) & (self.x0 <= col) & (col <= self.x1)

    def clamp(self, height: int, width: int) -> "DetectionBox":
        """Clip the box to an image of the given size."""
        x0 = min(max(self.x0, 0), width - 1)
        y0 = min(max(self.y0, 0), height - 1)
        x1 = min(max(self.x1, x0), width - 1)
        y1 = min(max(self.y1, y0), height - 1)
        return DetectionBox(x0, y0, x1, y1, self.confidence, self.label)


def check_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ShapeError(f"score map must be HxWxK, got shape {scores.shape}")
    h, w, k = scores.shape
    if h < 1 or w < 1 or k < 2:
        raise ShapeError(f"score map needs H, W >= 1 and K >= 2, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("score map contains non-finite values")
    return scores


def check_labels(labels, num_labels: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise ShapeError(f"label map must be a non-empty HxW array, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"label map must be integer typed, got {labels.dtype}")
    if labels.min() < 0:
        raise ValueError("label map contains negative labels")
    if num_labels is not None and labels.max() >= num_labels:
        raise ValueError(f"label {labels.max()} out of range for K={num_labels}")
    return labels.astype(np.int64, copy=False)


def softmax(scores, axis: int = -1) -> np.ndarray:
    """Normalized exponential along ``axis`` with max-subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax input contains non-finite values")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def one_hot(labels, num_labels: int) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(num_labels)).astype(np.float64)


def argmax_labels(scores) -> np.ndarray:
    """Per-pixel argmax; ties go to the smallest label index."""
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return np.argmax(check_scores(scores), axis=-1).astype(np.int64)


def _check_target(new_h: int, new_w: int):
    if int(new_h) < 1 or int(new_w) < 1:
        raise ValueError(f"target dimensions must be positive, got {new_h}x{new_w}")


def corner_aligned_coords(n_out: int, n_in: int) -> np.ndarray:
    """Source coordinates sampled when mapping ``n_in`` samples onto ``n_out``.

    The first and last samples of both grids coincide.
    """
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_sample(scores: np.ndarray, rows, cols) -> np.ndarray:
    """Bilinearly interpolate ``scores`` (H, W, K) at fractional positions.

    ``rows`` and ``cols`` broadcast against each other; the result has their
    broadcast shape plus a trailing label axis.
    """
    h, w = scores.shape[:2]
    rows, cols = np.broadcast_arrays(np.asarray(rows, float), np.asarray(cols, float))
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    top = scores[r0, c0] * (1 - fc) + scores[r0, c1] * fc
    bottom = scores[r1, c0] * (1 - fc) + scores[r1, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_scores(scores, new_h: int, new_w: int) -> np.ndarray:
    """Channel-wise bilinear resize with corner-aligned sampling."""
    scores = check_scores(scores)
    _check_target(new_h, new_w)
    h, w, _ = scores.shape
    if (h, w) == (new_h, new_w):
        return scores.copy()
    rows = corner_aligned_coords(new_h, h)[:, None]
    cols = corner_aligned_coords(new_w, w)[None, :]
    return bilinear_sample(scores, rows, cols)


def nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_labels(labels, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling at pixel centres."""
    labels = check_labels(labels)
    _check_target(new_h, new_w)
    h, w = labels.shape
    if (h, w) == (new_h, new_w):
        return labels.copy()
    return labels[np.ix_(nearest_indices(new_h, h), nearest_indices(new_w, w))]
