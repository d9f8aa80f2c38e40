"""Brute-force reference implementations used only by the tests.

These are written independently of the package internals: plain loops over
every state, no vectorized shortcuts.
"""
import itertools

import numpy as np
from scipy.special import logsumexp

from partseg.crbm import CrbmParams, model_score


def random_params(rng, grid_h, grid_w, k, j, hidden_bias=True, low=-1.0, high=1.0):
    p = grid_h * grid_w
    return CrbmParams(
        rng.uniform(low, high, (k, k)),
        rng.uniform(low, high, (p, j, k)),
        rng.uniform(low, high, (p, k)),
        rng.uniform(low, high, j) if hidden_bias else None,
        grid_h,
        grid_w,
    )


def all_states(params):
    p, j, k = params.num_pixels, params.num_hidden, params.num_labels
    for y in itertools.product(range(k), repeat=p):
        for h in itertools.product((0, 1), repeat=j):
            yield np.array(y), np.array(h, dtype=float)


def joint_table(v, params):
    """[(y, h, log P(y, h | v))] over the full state space."""
    states = list(all_states(params))
    scores = np.array([model_score(y.reshape(params.grid_h, params.grid_w), h, v, params) for y, h in states])
    logp = scores - logsumexp(scores)
    return [(y, h, lp) for (y, h), lp in zip(states, logp)]


def label_marginals(v, params):
    out = np.zeros((params.num_pixels, params.num_labels))
    for y, _, lp in joint_table(v, params):
        out[np.arange(params.num_pixels), y] += np.exp(lp)
    return out


def conditional_hidden(y, v, params):
    """P(h_j = 1 | y, v) by summing the joint over h."""
    y = np.ravel(y)
    num = np.zeros(params.num_hidden)
    den = 0.0
    for yy, h, lp in joint_table(v, params):
        if np.array_equal(yy, y):
            num += np.exp(lp) * h
            den += np.exp(lp)
    return num / den


def conditional_labels(h, v, params):
    """P(y_i = k | h, v) by summing the joint over y."""
    h = np.asarray(h, dtype=float)
    out = np.zeros((params.num_pixels, params.num_labels))
    den = 0.0
    for y, hh, lp in joint_table(v, params):
        if np.array_equal(hh, h):
            out[np.arange(params.num_pixels), y] += np.exp(lp)
            den += np.exp(lp)
    return out / den


def log_likelihood(y, v, params):
    """log P(y | v) = log sum_h P(y, h | v)."""
    y = np.ravel(y)
    terms = [lp for yy, _, lp in joint_table(v, params) if np.array_equal(yy, y)]
    return float(logsumexp(terms))


def finite_difference(fn, params, step=1e-5):
    """Central differences of fn(params) for every parameter, shaped like params."""
    base = params.to_vector()
    grad = np.zeros_like(base)
    for n in range(base.size):
        up, down = base.copy(), base.copy()
        up[n] += step
        down[n] -= step
        grad[n] = (fn(params.from_vector(up)) - fn(params.from_vector(down))) / (2 * step)
    return params.from_vector(grad)


def group_relative_errors(a, b):
    """Per group, max |a - b| divided by max |b| (the infinity-norm relative error)."""
    out = {}
    for name, ga in a.groups().items():
        gb = b.groups()[name]
        out[name] = float(np.max(np.abs(ga - gb)) / max(np.max(np.abs(gb)), 1e-12))
    return out


def iou_oracle(preds, gts, k):
    """Per-label IOU over pooled pixels via explicit loops; NaN where the union is empty."""
    inter = [0] * k
    union = [0] * k
    for pred, gt in zip(preds, gts):
        for a, b in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
            for lab in range(k):
                pa, gb = a == lab, b == lab
                inter[lab] += pa and gb
                union[lab] += pa or gb
    return [inter[c] / union[c] if union[c] else float("nan") for c in range(k)]


def fuse_oracle(pyramid, boxes, height, width):
    """Per-pixel scale choice and bilinear read with explicit loops."""
    scales = pyramid.scales
    nominal = pyramid.nominal
    k = pyramid.score_maps[0].shape[2]
    fallback = min(range(len(scales)), key=lambda n: (abs(scales[n] - 1.0), n))
    out = np.zeros((height, width, k))
    for r in range(height):
        for c in range(width):
            best, best_conf = None, None
            for b in boxes:
                if b.x0 <= c <= b.x1 and b.y0 <= r <= b.y1:
                    if best is None or b.confidence > best_conf:
                        best, best_conf = b, b.confidence
            if best is None:
                idx = fallback
            else:
                h, w = best.y1 - best.y0 + 1, best.x1 - best.x0 + 1
                costs = [abs(s * h - nominal) + abs(s * w - nominal) for s in scales]
                idx = min(range(len(scales)), key=lambda n: (costs[n], n))
            m = pyramid.score_maps[idx]
            hs, ws = m.shape[:2]
            y = r * ((hs - 1) / (height - 1)) if height > 1 and hs > 1 else 0.0
            x = c * ((ws - 1) / (width - 1)) if width > 1 and ws > 1 else 0.0
            r0, c0 = min(int(np.floor(y)), hs - 1), min(int(np.floor(x)), ws - 1)
            r1, c1 = min(r0 + 1, hs - 1), min(c0 + 1, ws - 1)
            fy, fx = y - r0, x - c0
            top = m[r0, c0] * (1 - fx) + m[r0, c1] * fx
            bottom = m[r1, c0] * (1 - fx) + m[r1, c1] * fx
            out[r, c] = top * (1 - fy) + bottom * fy
    return out
