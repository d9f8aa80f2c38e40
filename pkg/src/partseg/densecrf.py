"""Fully connected CRF with Gaussian pairwise kernels and mean-field inference.

Messages are computed with an explicit N x N kernel matrix. That is
quadratic in the pixel count but exact, which keeps this module usable as
its own test oracle at the sizes we run (N up to a few thousand).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .core import ShapeError, argmax_labels, check_scores, softmax
from .metrics import iou_report

PROB_FLOOR = 1e-10
NORM_TOL = 1e-9


@dataclass(frozen=True)
class DenseCrfParams:
    """Kernel weights, bandwidths and the mean-field schedule.

    ``theta_alpha``/``theta_beta`` are the spatial and colour bandwidths of the
    appearance kernel, ``theta_gamma`` the spatial bandwidth of the smoothness
    kernel.
    """

    w_app: float = 5.0
    w_smooth: float = 3.0
    theta_alpha: float = 50.0
    theta_beta: float = 10.0
    theta_gamma: float = 3.0
    iterations: int = 10
    update_mode: str = "parallel"
    damping: float = 1.0

    def __post_init__(self):
        if self.w_app < 0 or self.w_smooth < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.update_mode not in ("parallel", "sequential"):
            raise ValueError(f"update_mode must be 'parallel' or 'sequential', got {self.update_mode!r}")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    @classmethod
    def from_mapping(cls, values: dict, source="<params>") -> "DenseCrfParams":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"{source}: unknown dense CRF parameter {key!r}")
            if key == "update_mode":
                kwargs[key] = str(raw)
            elif key == "iterations":
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass
class MeanFieldState:
    Q: np.ndarray
    iteration: int = 0


class PairwiseFeatures:
    """Squared spatial and colour distances between every pixel pair of an image."""

    def __init__(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"image must be HxWx3, got {image.shape}")
        h, w, _ = image.shape
        self.shape = (h, w)
        rows, cols = np.divmod(np.arange(h * w), w)
        pos = np.stack([rows, cols], axis=1).astype(np.float64)
        col = image.reshape(-1, 3)
        self.pos_sq = _sq_dists(pos)
        self.col_sq = _sq_dists(col)

    def kernel(self, params: DenseCrfParams) -> np.ndarray:
        k = np.zeros_like(self.pos_sq)
        if params.w_app:
            k += params.w_app * np.exp(
                -self.pos_sq / (2 * params.theta_alpha**2) - self.col_sq / (2 * params.theta_beta**2)
            )
        if params.w_smooth:
            k += params.w_smooth * np.exp(-self.pos_sq / (2 * params.theta_gamma**2))
        np.fill_diagonal(k, 0.0)
        return k


def _sq_dists(x: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - x[None, :, :]
    return np.einsum("ijc,ijc->ij", d, d)


def unary_from_scores(v) -> np.ndarray:
    """Unary costs ``-log softmax(v)`` with probabilities clamped at 1e-10."""
    return -np.log(np.maximum(softmax(check_scores(v)), PROB_FLOOR))


def pairwise_kernel(i, j, image, params: DenseCrfParams) -> float:
    """Kernel value between pixels ``i`` and ``j`` given as (row, col)."""
    pi, pj = np.asarray(i, dtype=np.float64), np.asarray(j, dtype=np.float64)
    if np.array_equal(pi, pj):
        raise ValueError("pairwise kernel excludes self-edges (i == j)")
    image = np.asarray(image, dtype=np.float64)
    ci = image[int(pi[0]), int(pi[1])]
    cj = image[int(pj[0]), int(pj[1])]
    dp = float(np.sum((pi - pj) ** 2))
    dc = float(np.sum((ci - cj) ** 2))
    app = np.exp(-dp / (2 * params.theta_alpha**2) - dc / (2 * params.theta_beta**2))
    smooth = np.exp(-dp / (2 * params.theta_gamma**2))
    return float(params.w_app * app + params.w_smooth * smooth)


def _check_q(Q):
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(Q < 0) or np.any(np.abs(Q.sum(axis=-1) - 1.0) > NORM_TOL):
        raise ValueError("mean-field state is not normalized")
    return Q


def _blend(old: np.ndarray, logits: np.ndarray, damping: float) -> np.ndarray:
    new = softmax(logits, axis=-1)
    if damping == 1.0:
        return new
    with np.errstate(divide="ignore"):
        log_mix = (1 - damping) * np.log(old) + damping * np.log(new)
    return softmax(log_mix, axis=-1)


def meanfield_step(state: MeanFieldState, unary, image, params: DenseCrfParams, kernel=None) -> MeanFieldState:
    """One mean-field sweep under Potts compatibility.

    The message to pixel ``i`` for label ``k`` is ``sum_{j != i} k(i,j) (1 - Q_j(k))``.
    Parallel mode updates all pixels from the old ``Q``; sequential mode
    updates pixels in raster order using the freshest values.

    Args:
        kernel: optional precomputed (N, N) kernel matrix for ``image``.
    """
    Q = _check_q(state.Q)
    unary = np.asarray(unary, dtype=np.float64)
    if unary.shape != Q.shape:
        raise ShapeError(f"unary {unary.shape} does not match Q {Q.shape}")
    h, w, k = Q.shape
    if kernel is None:
        kernel = PairwiseFeatures(image).kernel(params)
    q = Q.reshape(-1, k)
    u = unary.reshape(-1, k)
    if params.update_mode == "parallel":
        msg = kernel @ (1.0 - q)
        q = _blend(q, -u - msg, params.damping)
    else:
        q = q.copy()
        for i in range(h * w):
            msg = kernel[i] @ (1.0 - q)
            q[i] = _blend(q[i], -u[i] - msg, params.damping)
    return MeanFieldState(q.reshape(h, w, k), state.iteration + 1)


def free_energy(Q, unary, image, params: DenseCrfParams, kernel=None) -> float:
    """Mean-field free energy: expected cost minus entropy of ``Q``."""
    Q = _check_q(Q)
    k = Q.shape[-1]
    q = Q.reshape(-1, k)
    u = np.asarray(unary, dtype=np.float64).reshape(-1, k)
    if kernel is None:
        kernel = PairwiseFeatures(image).kernel(params)
    expected_unary = float(np.sum(q * u))
    pairwise = 0.5 * float(np.sum(q * (kernel @ (1.0 - q))))
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = float(np.sum(np.where(q > 0, q * np.log(q), 0.0)))
    return expected_unary + pairwise + neg_entropy


def crf_infer(v, image, params: DenseCrfParams, features: PairwiseFeatures | None = None):
    """Run ``params.iterations`` mean-field sweeps from ``softmax(v)``.

    Returns:
        ``(labels, Q)``: the argmax label map and the final distributions.
    """
    v = check_scores(v)
    if features is None:
        features = PairwiseFeatures(image)
    if features.shape != v.shape[:2]:
        raise ShapeError(f"image {features.shape} does not match scores {v.shape[:2]}")
    kernel = features.kernel(params)
    unary = unary_from_scores(v)
    state = MeanFieldState(softmax(v))
    for _ in range(params.iterations):
        state = meanfield_step(state, unary, None, params, kernel=kernel)
    return argmax_labels(state.Q), state.Q


DEFAULT_GRID = {
    "theta_alpha": (10.0, 30.0, 50.0, 80.0),
    "theta_beta": (3.0, 10.0, 20.0),
    "theta_gamma": (1.0, 3.0),
    "w_app": (1.0, 3.0, 5.0, 10.0),
    "w_smooth": (1.0, 3.0),
}


def parameter_grid(grid: dict | None = None, base: DenseCrfParams | None = None) -> list[DenseCrfParams]:
    """Cartesian product of the grid values, last key varying fastest."""
    grid = DEFAULT_GRID if grid is None else grid
    base = base or DenseCrfParams()
    keys = list(grid)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(
    candidates: Iterable[DenseCrfParams],
    validation: Sequence[tuple],
    num_labels: int | None = None,
):
    """Pick the candidate with the best pooled mean IOU on a validation set.

    Args:
        validation: ``(scores, image, ground_truth)`` triples.

    Returns:
        ``(best, table)`` with ``table`` a list of ``(params, mean_iou)`` in
        candidate order; ties keep the earliest candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("grid_search needs at least one candidate")
    if not validation:
        raise ValueError("grid_search needs a non-empty validation set")
    if num_labels is None:
        num_labels = check_scores(validation[0][0]).shape[-1]
    feats = [PairwiseFeatures(img) for _, img, _ in validation]
    gts = [np.asarray(gt) for _, _, gt in validation]
    table = []
    best, best_score = None, -np.inf
    for params in candidates:
        preds = [crf_infer(v, None, params, features=f)[0] for (v, _, _), f in zip(validation, feats)]
        score = iou_report(preds, gts, num_labels).mean
        table.append((params, score))
        if score > best_score:
            best, best_score = params, score
    return best, table


def format_table(table) -> str:
    return "".join(
        f"{p.theta_alpha!r} {p.theta_beta!r} {p.theta_gamma!r} {p.w_app!r} {p.w_smooth!r} {score!r}\n"
        for p, score in table
    )
