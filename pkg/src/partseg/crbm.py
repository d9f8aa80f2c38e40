"""Conditional restricted Boltzmann machine over part label maps.

The model couples a label map ``y`` (one categorical variable per pixel of
a fixed canonical grid), binary hidden units ``h`` and observed per-pixel
scores ``v``. Its unnormalized log-probability is

    S(y, h, v) = sum_{i,k,k'} C[k,k'] y[i,k] v[i,k']
               + sum_{i,j,k} y[i,k] W[i,j,k] h[j]
               + sum_{i,k} y[i,k] B[i,k] + sum_j b[j] h[j]

and ``P(y, h | v) = exp(S) / Z(v)`` with an image-dependent partition
function. The bipartite structure makes both conditionals factorize, which
is what block Gibbs sampling and contrastive divergence rely on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .core import ShapeError, check_scores, log_softmax, one_hot, resize_scores, softmax

logger = logging.getLogger(__name__)

MAX_ENUMERATION = 2**21


@dataclass
class CrbmParams:
    """Model parameters; also used to hold gradients of the same shape.

    Attributes:
        calibration: (K, K) weights mixing the observed scores into label biases.
        interactions: (P, J, K) label/hidden coupling, P = grid_h * grid_w.
        location_bias: (P, K) per-position label biases.
        hidden_bias: (J,) hidden biases, or None for the bias-free energy.
    """

    calibration: np.ndarray
    interactions: np.ndarray
    location_bias: np.ndarray
    hidden_bias: np.ndarray | None
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.calibration = np.asarray(self.calibration, dtype=np.float64)
        self.interactions = np.asarray(self.interactions, dtype=np.float64)
        self.location_bias = np.asarray(self.location_bias, dtype=np.float64)
        if self.hidden_bias is not None:
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
        k = self.calibration.shape[0]
        p = self.grid_h * self.grid_w
        if self.calibration.shape != (k, k) or k < 2:
            raise ShapeError(f"calibration must be KxK with K >= 2, got {self.calibration.shape}")
        if self.interactions.ndim != 3 or self.interactions.shape[0] != p or self.interactions.shape[2] != k:
            raise ShapeError(
                f"interactions must be ({p}, J, {k}), got {self.interactions.shape}"
            )
        if self.location_bias.shape != (p, k):
            raise ShapeError(f"location_bias must be ({p}, {k}), got {self.location_bias.shape}")
        if self.hidden_bias is not None and self.hidden_bias.shape != (self.num_hidden,):
            raise ShapeError(
                f"hidden_bias must have length {self.num_hidden}, got {self.hidden_bias.shape}"
            )
        for name, arr in self.groups().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def num_labels(self) -> int:
        return self.calibration.shape[0]

    @property
    def num_hidden(self) -> int:
        return self.interactions.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.grid_h * self.grid_w

    def groups(self) -> dict[str, np.ndarray]:
        out = {
            "calibration": self.calibration,
            "interactions": self.interactions,
            "location_bias": self.location_bias,
        }
        if self.hidden_bias is not None:
            out["hidden_bias"] = self.hidden_bias
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.groups().values()])

    def from_vector(self, vec) -> "CrbmParams":
        """Parameters shaped like ``self`` filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        parts, off = {}, 0
        for name, arr in self.groups().items():
            parts[name] = vec[off : off + arr.size].reshape(arr.shape)
            off += arr.size
        if off != vec.size:
            raise ShapeError(f"vector has {vec.size} entries, parameters need {off}")
        return replace(self, **parts)

    def map(self, fn, *others: "CrbmParams") -> "CrbmParams":
        """Apply ``fn`` group-wise across ``self`` and ``others``."""
        parts = {
            name: fn(arr, *(o.groups()[name] for o in others))
            for name, arr in self.groups().items()
        }
        return replace(self, **parts)

    def copy(self) -> "CrbmParams":
        return self.map(np.copy)

    def zeros_like(self) -> "CrbmParams":
        return self.map(np.zeros_like)

    def dot(self, other: "CrbmParams") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.groups().values(), other.groups().values())))

    @classmethod
    def neutral(cls, grid_h, grid_w, num_labels, num_hidden, hidden_bias=True) -> "CrbmParams":
        """Identity calibration, everything else zero: reduces to a per-pixel softmax."""
        p = grid_h * grid_w
        return cls(
            calibration=np.eye(num_labels),
            interactions=np.zeros((p, num_hidden, num_labels)),
            location_bias=np.zeros((p, num_labels)),
            hidden_bias=np.zeros(num_hidden) if hidden_bias else None,
            grid_h=grid_h,
            grid_w=grid_w,
        )


@dataclass
class CrbmTrainConfig:
    cd_steps: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.5
    final_momentum: float = 0.9
    momentum_switch_epoch: int = 5
    weight_decay: float = 1e-4
    epochs: int = 200
    minibatch: int = 20
    seed: int = 0
    num_hidden: int = 50
    hidden_bias: bool = True
    init_scale: float = 0.01

    def __post_init__(self):
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be >= 1")
        if self.learning_rate <= 0 or self.minibatch < 1 or self.epochs < 0:
            raise ValueError("learning_rate and minibatch must be positive, epochs >= 0")
        if self.momentum < 0 or self.final_momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.num_hidden < 0:
            raise ValueError("num_hidden must be >= 0")


# -- input normalization ----------------------------------------------------------

def _flat_labels(y, params: CrbmParams) -> np.ndarray:
    y = np.asarray(y)
    if y.size != params.num_pixels:
        raise ShapeError(f"label map has {y.size} pixels, model grid has {params.num_pixels}")
    y = y.reshape(-1).astype(np.int64)
    if y.min() < 0 or y.max() >= params.num_labels:
        raise ValueError(f"labels must lie in [0, {params.num_labels})")
    return y


def _flat_scores(v, params: CrbmParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        if v.shape[:2] != (params.grid_h, params.grid_w):
            raise ShapeError(f"score map is {v.shape[:2]}, model grid is {(params.grid_h, params.grid_w)}")
        v = v.reshape(-1, v.shape[2])
    if v.shape != (params.num_pixels, params.num_labels):
        raise ShapeError(f"scores must be ({params.num_pixels}, {params.num_labels}), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("scores contain non-finite values")
    return v


def _flat_hidden(h, params: CrbmParams) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.shape != (params.num_hidden,):
        raise ShapeError(f"hidden state must have length {params.num_hidden}, got {h.shape}")
    return h


def _hidden_bias(params: CrbmParams) -> np.ndarray:
    return params.hidden_bias if params.hidden_bias is not None else np.zeros(params.num_hidden)


# -- energy and conditionals --------------------------------------------------------

def calibrated_scores(v, params: CrbmParams) -> np.ndarray:
    """Per-pixel label biases ``C v_i`` contributed by the observed scores, (P, K)."""
    return _flat_scores(v, params) @ params.calibration.T


def model_score(y, h, v, params: CrbmParams) -> float:
    """Unnormalized log-probability S(y, h, v); larger means more probable."""
    y = _flat_labels(y, params)
    h = _flat_hidden(h, params)
    unary = calibrated_scores(v, params) + params.location_bias
    rows = np.arange(params.num_pixels)
    coupling = params.interactions[rows, :, y]  # (P, J)
    return float(unary[rows, y].sum() + (coupling @ h).sum() + _hidden_bias(params) @ h)


def hidden_input(y, params: CrbmParams) -> np.ndarray:
    y = _flat_labels(y, params)
    rows = np.arange(params.num_pixels)
    return params.interactions[rows, :, y].sum(axis=0) + _hidden_bias(params)


def hidden_posterior(y, params: CrbmParams) -> np.ndarray:
    """P(h_j = 1 | y) for every hidden unit; independent of ``v``."""
    return expit(hidden_input(y, params))


def label_logits(h, v, params: CrbmParams) -> np.ndarray:
    h = _flat_hidden(h, params)
    return calibrated_scores(v, params) + np.einsum("pjk,j->pk", params.interactions, h) + params.location_bias


def label_conditional(h, v, params: CrbmParams) -> np.ndarray:
    """P(y_i = k | h, v) as a (P, K) array; pixels are independent given h."""
    return softmax(label_logits(h, v, params), axis=-1)


class _Chains:
    """Vectorized block-Gibbs machinery for a batch of score maps.

    Caches the calibrated unaries and a (P*K, J) view of the interactions so
    each half-sweep is a single matrix product.
    """

    def __init__(self, params: CrbmParams, scores: Sequence[np.ndarray]):
        self.params = params
        self.P, self.K, self.J = params.num_pixels, params.num_labels, params.num_hidden
        self.w = np.ascontiguousarray(params.interactions.transpose(0, 2, 1)).reshape(self.P * self.K, self.J)
        self.b = _hidden_bias(params)
        self.v = np.stack([_flat_scores(s, params) for s in scores])  # (B, P, K)
        self.unary = self.v @ params.calibration.T + params.location_bias  # (B, P, K)
        self.offsets = np.arange(self.P) * self.K

    def hidden_probs(self, y: np.ndarray) -> np.ndarray:
        """(B, P) labels -> (B, J) activation probabilities."""
        if self.J == 0:
            return np.zeros((y.shape[0], 0))
        # Summing gathered rows equals one_hot(y) @ w without building the one-hot.
        idx = y + self.offsets
        return expit(self.w[idx].sum(axis=1) + self.b)

    def label_probs(self, h: np.ndarray) -> np.ndarray:
        """(B, J) hidden states -> (B, P, K) label distributions."""
        logits = self.unary + (h @ self.w.T).reshape(-1, self.P, self.K)
        return softmax(logits, axis=-1)

    @staticmethod
    def sample_hidden(probs, uniforms):
        return (uniforms < probs).astype(np.float64)

    def sample_labels(self, probs, uniforms):
        cdf = np.cumsum(probs, axis=-1)
        y = (uniforms[..., None] >= cdf).sum(axis=-1)
        return np.minimum(y, self.K - 1)

    def sweep(self, y, rngs):
        """One block-Gibbs sweep: h ~ P(h|y), then y ~ P(y|h, v).

        Each chain draws its J hidden uniforms and then its P label uniforms
        from its own generator, so a chain's trajectory does not depend on
        which other chains share the batch.
        """
        hp = self.hidden_probs(y)
        h = self.sample_hidden(hp, np.stack([g.random(self.J) for g in rngs]))
        yp = self.label_probs(h)
        y = self.sample_labels(yp, np.stack([g.random(self.P) for g in rngs]))
        return y, h, yp


def gibbs_sweep(state, v, params: CrbmParams, rng: np.random.Generator):
    """Advance one chain by a block-Gibbs sweep.

    Args:
        state: ``(labels, hidden)``; labels on the model grid, hidden of length J.
        v: score map on the model grid.
        rng: generator consumed in fixed order (hidden block, then label block).

    Returns:
        ``(labels, hidden)`` with labels shaped like the input labels.
    """
    y0, h0 = state
    shape = np.shape(y0)
    y = _flat_labels(y0, params)
    _flat_hidden(h0, params)
    chains = _Chains(params, [v])
    y, h, _ = chains.sweep(y[None], [rng])
    return y[0].reshape(shape), h[0]


# -- contrastive divergence -------------------------------------------------------------

def _as_rngs(rng, n):
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n)
    rngs = list(rng)
    if len(rngs) != n:
        raise ValueError(f"need {n} generators, got {len(rngs)}")
    return rngs


def _statistics(params, v, y_onehot, h_mean, y_mean):
    """Batch-averaged sufficient statistics of S.

    ``y_onehot`` pairs with ``h_mean`` for the coupling term; ``y_mean`` feeds
    the label-only terms.
    """
    n, npix, k = v.shape
    coupling = y_onehot.reshape(n, npix * k).T @ h_mean  # (P*K, J)
    stats = {
        "calibration": y_mean.reshape(-1, k).T @ v.reshape(-1, k) / n,
        "interactions": coupling.reshape(npix, k, -1).transpose(0, 2, 1) / n,
        "location_bias": y_mean.mean(axis=0),
    }
    if params.hidden_bias is not None:
        stats["hidden_bias"] = h_mean.mean(axis=0)
    return replace(params, **stats)


def cd_gradient(batch, params: CrbmParams, config: CrbmTrainConfig, rng) -> CrbmParams:
    """Contrastive-divergence estimate of the log-likelihood gradient.

    The positive phase is exact given each training pair. The negative phase
    starts a chain at the ground-truth labels, runs ``config.cd_steps`` block
    sweeps, and reads statistics off the final state with mean activations:
    label-only terms use P(y|h_C, v), hidden terms use P(h|y_C).

    Args:
        batch: non-empty sequence of ``(labels, scores)`` pairs on the model grid.
        rng: a Generator (spawned into one child per example) or a sequence of
            one Generator per example.

    Returns:
        Gradient shaped like ``params``, averaged over the batch.
    """
    if len(batch) == 0:
        raise ValueError("cd_gradient needs a non-empty batch")
    rngs = _as_rngs(rng, len(batch))
    chains = _Chains(params, [v for _, v in batch])
    y_data = np.stack([_flat_labels(y, params) for y, _ in batch])
    k = params.num_labels

    y_data_1h = one_hot(y_data, k)
    h_data = chains.hidden_probs(y_data)
    positive = _statistics(params, chains.v, y_data_1h, h_data, y_data_1h)

    y = y_data
    for _ in range(config.cd_steps):
        y, _h, y_probs = chains.sweep(y, rngs)
    y_1h = one_hot(y, k)
    negative = _statistics(params, chains.v, y_1h, chains.hidden_probs(y), y_probs)
    return positive.map(np.subtract, negative)


def initialize(grid_h, grid_w, num_labels, config: CrbmTrainConfig) -> CrbmParams:
    params = CrbmParams.neutral(grid_h, grid_w, num_labels, config.num_hidden, config.hidden_bias)
    rng = np.random.default_rng(config.seed)
    params.interactions = rng.normal(0.0, config.init_scale, params.interactions.shape)
    return params


def _check_dataset(dataset, config):
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    y0, v0 = dataset[0]
    h, w = np.shape(y0)
    k = np.shape(v0)[-1]
    for n, (y, v) in enumerate(dataset):
        if np.shape(y) != (h, w) or np.shape(v) != (h, w, k):
            raise ShapeError(
                f"example {n}: labels {np.shape(y)} / scores {np.shape(v)} "
                f"inconsistent with ({h}, {w}) / ({h}, {w}, {k})"
            )
    return h, w, k


def train(dataset, config: CrbmTrainConfig | None = None, callback=None):
    """Fit a conditional RBM by minibatch SGD on CD gradients.

    Uses momentum and weight decay (decay on calibration and interactions
    only). Minibatch order and every chain's random stream are keyed on
    ``(seed, epoch, example index)``, so training is reproducible bit for bit.

    Args:
        dataset: sequence of ``(labels, scores)`` pairs sharing grid and K.
        callback: optional ``callback(epoch, params, proxy)`` after each epoch.

    Returns:
        ``(params, log)`` where ``log`` lists ``(epoch, proxy)`` and ``proxy`` is
        the epoch mean of positive minus negative phase score.
    """
    config = config or CrbmTrainConfig()
    grid_h, grid_w, k = _check_dataset(dataset, config)
    params = initialize(grid_h, grid_w, k, config)
    velocity = params.zeros_like()
    decay = {"calibration": config.weight_decay, "interactions": config.weight_decay}
    log = []
    n = len(dataset)
    for epoch in range(config.epochs):
        momentum = config.momentum if epoch < config.momentum_switch_epoch else config.final_momentum
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        proxies = []
        for start in range(0, n, config.minibatch):
            idx = order[start : start + config.minibatch]
            rngs = [np.random.default_rng([config.seed, epoch, int(i)]) for i in idx]
            grad = cd_gradient([dataset[i] for i in idx], params, config, rngs)
            proxies.append(params.dot(grad) * len(idx))
            for name, g in grad.groups().items():
                theta = getattr(params, name)
                vel = getattr(velocity, name)
                step = g - decay.get(name, 0.0) * theta
                vel *= momentum
                vel += config.learning_rate * step
                theta += vel
        proxy = float(sum(proxies) / n)
        log.append((epoch, proxy))
        logger.debug("epoch %d proxy %.6g", epoch, proxy)
        if callback is not None:
            callback(epoch, params, proxy)
    return params, log


def format_log(log) -> str:
    return "".join(f"{epoch}\t{proxy!r}\n" for epoch, proxy in log)


# -- inference ----------------------------------------------------------------------------

def predict_marginals(v, params: CrbmParams, burn_in: int = 50, samples: int = 200, seed: int = 0):
    """Estimate per-pixel marginals P(y_i | v) by block Gibbs sampling.

    The chain starts at the per-pixel argmax of ``v``; after ``burn_in``
    sweeps the label conditionals of the next ``samples`` sweeps are averaged
    (a Rao-Blackwellized estimate).

    Returns:
        (grid_h, grid_w, K) probability map.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if burn_in < 0:
        raise ValueError("burn_in must be >= 0")
    chains = _Chains(params, [v])
    rngs = [np.random.default_rng(seed)]
    y = chains.v.argmax(axis=-1)
    for _ in range(burn_in):
        y, _, _ = chains.sweep(y, rngs)
    acc = np.zeros((params.num_pixels, params.num_labels))
    for _ in range(samples):
        y, _, probs = chains.sweep(y, rngs)
        acc += probs[0]
    acc /= samples
    return acc.reshape(params.grid_h, params.grid_w, params.num_labels)


@dataclass
class InferenceConfig:
    burn_in: int = 50
    samples: int = 200
    seed: int = 0
    floor: float = 1e-8


def rbm_refine(v_full, params: CrbmParams, config: InferenceConfig | None = None) -> np.ndarray:
    """Refine a score map of any resolution with the shape prior.

    Scores are resampled to the model grid, marginals are estimated there and
    the log-marginal correction ``log m - log softmax(v_grid)`` is resampled
    back and added to ``log softmax(v_full)``. At the model resolution this is
    just ``log m``; elsewhere it keeps full-resolution detail, and neutral
    parameters leave the per-pixel argmax untouched.
    """
    config = config or InferenceConfig()
    v_full = check_scores(v_full)
    h, w, _ = v_full.shape
    v_grid = resize_scores(v_full, params.grid_h, params.grid_w)
    marg = predict_marginals(v_grid, params, config.burn_in, config.samples, config.seed)
    log_m = np.log(np.maximum(marg, config.floor))
    if (h, w) == (params.grid_h, params.grid_w):
        return log_m
    correction = log_m - log_softmax(v_grid)
    return log_softmax(v_full) + resize_scores(correction, h, w)


# -- exact enumeration (tiny models) ----------------------------------------------------------

def state_space_size(params: CrbmParams) -> int:
    return params.num_labels**params.num_pixels * 2**params.num_hidden


def _check_enumerable(params: CrbmParams):
    size = state_space_size(params)
    if size > MAX_ENUMERATION:
        raise ValueError(
            f"state space too large for enumeration: K^P * 2^J = "
            f"{params.num_labels}^{params.num_pixels} * 2^{params.num_hidden} = {size} > {MAX_ENUMERATION}"
        )


def _labelings(p: int, k: int, chunk: int = 1 << 15):
    """Yield every labeling of ``p`` pixels with ``k`` labels, in chunks."""
    total = k**p
    powers = k ** np.arange(p - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield (codes[:, None] // powers) % k


def _log_free(chains: _Chains, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log sum_h exp S(y, h, v) for a batch of labelings, plus P(h=1|y)."""
    rows = np.arange(chains.P)
    unary = chains.unary[0][rows, ys].sum(axis=1)
    if chains.J == 0:
        return unary, np.zeros((ys.shape[0], 0))
    a = chains.w[ys + chains.offsets].sum(axis=1) + chains.b
    return unary + np.logaddexp(0.0, a).sum(axis=1), expit(a)


def log_partition(v, params: CrbmParams) -> float:
    _check_enumerable(params)
    chains = _Chains(params, [v])
    parts = [logsumexp(_log_free(chains, ys)[0]) for ys in _labelings(chains.P, chains.K)]
    return float(logsumexp(parts))


def exact_log_likelihood(y, v, params: CrbmParams) -> float:
    """log P(y | v), with hidden units summed out and Z(v) enumerated."""
    _check_enumerable(params)
    y = _flat_labels(y, params)
    chains = _Chains(params, [v])
    return float(_log_free(chains, y[None])[0][0] - log_partition(v, params))


def exact_marginals(v, params: CrbmParams) -> np.ndarray:
    """Enumerated P(y_i = k | v) as (grid_h, grid_w, K)."""
    _check_enumerable(params)
    chains = _Chains(params, [v])
    log_z = log_partition(v, params)
    marg = np.zeros((chains.P, chains.K))
    rows = np.arange(chains.P)
    for ys in _labelings(chains.P, chains.K):
        w = np.exp(_log_free(chains, ys)[0] - log_z)
        for i in rows:
            marg[i] += np.bincount(ys[:, i], weights=w, minlength=chains.K)
    return marg.reshape(params.grid_h, params.grid_w, params.num_labels)


def exact_gradient(y, v, params: CrbmParams) -> CrbmParams:
    """Gradient of :func:`exact_log_likelihood` by full enumeration."""
    _check_enumerable(params)
    y = _flat_labels(y, params)
    chains = _Chains(params, [v])
    k = params.num_labels
    v_flat = chains.v[0]

    y_1h = one_hot(y, k)
    h_data = _log_free(chains, y[None])[1][0]
    positive = _statistics(params, v_flat[None], y_1h[None], h_data[None], y_1h[None])

    log_z = log_partition(v, params)
    e_y = np.zeros((chains.P, k))
    e_yh = np.zeros((chains.P * k, chains.J))
    e_h = np.zeros(chains.J)
    for ys in _labelings(chains.P, k):
        log_f, hp = _log_free(chains, ys)
        w = np.exp(log_f - log_z)
        idx = ys + chains.offsets
        for i in range(chains.P):
            np.add.at(e_yh, idx[:, i], w[:, None] * hp)
        e_y += np.einsum("n,npk->pk", w, one_hot(ys, k))
        e_h += w @ hp
    e_yh = e_yh.reshape(chains.P, k, chains.J).transpose(0, 2, 1)
    negative = {
        "calibration": e_y.T @ v_flat,
        "interactions": e_yh,
        "location_bias": e_y,
    }
    if params.hidden_bias is not None:
        negative["hidden_bias"] = e_h
    return positive.map(np.subtract, replace(params, **negative))

