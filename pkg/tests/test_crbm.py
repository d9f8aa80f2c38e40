import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from partseg.core import argmax_labels, softmax
from partseg.crbm import (
    CrbmParams,
    CrbmTrainConfig,
    InferenceConfig,
    cd_gradient,
    exact_gradient,
    exact_log_likelihood,
    exact_marginals,
    format_log,
    gibbs_sweep,
    hidden_posterior,
    initialize,
    label_conditional,
    log_partition,
    model_score,
    predict_marginals,
    rbm_refine,
    train,
)


def tiny(seed=0, gh=2, gw=2, k=2, j=2, hidden_bias=True):
    return oracles.random_params(np.random.default_rng(seed), gh, gw, k, j, hidden_bias)


def scores(seed, gh=2, gw=2, k=2):
    return np.random.default_rng(seed + 100).normal(size=(gh, gw, k))


# -- model_score ---------------------------------------------------------------

def test_model_score_zero_params():
    params = CrbmParams.neutral(2, 3, 3, 4)
    params.calibration[:] = 0
    rng = np.random.default_rng(0)
    for _ in range(5):
        y = rng.integers(0, 3, (2, 3))
        h = rng.integers(0, 2, 4)
        assert model_score(y, h, rng.normal(size=(2, 3, 3)), params) == 0.0


def test_model_score_single_pixel_substitution():
    params = CrbmParams(np.eye(2), np.zeros((1, 0, 2)), np.zeros((1, 2)), None, 1, 1)
    assert model_score([[0]], [], np.array([[[2.0, 0.0]]]), params) == 2.0
    assert model_score([[1]], [], np.array([[[2.0, 0.0]]]), params) == 0.0


def _quadratic_form_score(y, h, v, params):
    """S as z.W.z over z = (onehot(y), h, v, 1) with W upper block-triangular."""
    p, j, k = params.num_pixels, params.num_hidden, params.num_labels
    ny, nh, nv = p * k, j, p * k
    n = ny + nh + nv + 1
    W = np.zeros((n, n))
    for i in range(p):
        for a in range(k):
            row = i * k + a
            for b in range(k):
                W[row, ny + nh + i * k + b] = params.calibration[a, b]
            for u in range(j):
                W[row, ny + u] = params.interactions[i, u, a]
            W[row, n - 1] = params.location_bias[i, a]
    if params.hidden_bias is not None:
        for u in range(j):
            W[ny + u, n - 1] = params.hidden_bias[u]
    z = np.concatenate([np.eye(k)[np.ravel(y)].ravel(), h, np.ravel(v), [1.0]])
    return z @ W @ z


@pytest.mark.parametrize("seed", range(10))
def test_model_score_equals_quadratic_form(seed):
    rng = np.random.default_rng(seed)
    gh, gw, k, j = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(0, 4))
    params = oracles.random_params(rng, gh, gw, k, j, hidden_bias=bool(seed % 2))
    y = rng.integers(0, k, (gh, gw))
    h = rng.integers(0, 2, j).astype(float)
    v = rng.normal(size=(gh, gw, k))
    assert model_score(y, h, v, params) == pytest.approx(_quadratic_form_score(y, h, v, params), abs=1e-12)


def test_model_score_rejects_mismatch():
    params = tiny()
    with pytest.raises(ValueError):
        model_score(np.zeros((3, 3), int), np.zeros(2), scores(0), params)
    with pytest.raises(ValueError):
        model_score(np.zeros((2, 2), int), np.zeros(3), scores(0), params)
    with pytest.raises(ValueError):
        model_score(np.zeros((2, 2), int), np.zeros(2), np.zeros((2, 2, 3)), params)


# -- conditionals ----------------------------------------------------------------

def test_hidden_posterior_examples():
    params = CrbmParams.neutral(2, 2, 3, 4)
    np.testing.assert_array_equal(hidden_posterior(np.zeros((2, 2), int), params), 0.5)
    params.interactions[1, 2, 0] = math.log(3)
    post = hidden_posterior(np.zeros((2, 2), int), params)
    assert post[2] == pytest.approx(0.75, abs=1e-15)


def test_label_conditional_examples():
    params = CrbmParams.neutral(2, 2, 3, 4)
    params.calibration[:] = 0
    h = np.array([1, 0, 1, 1])
    np.testing.assert_array_equal(label_conditional(h, scores(0, k=3), params), 1 / 3)
    params = CrbmParams.neutral(2, 2, 3, 4)
    v = scores(1, k=3)
    np.testing.assert_allclose(label_conditional(h, v, params), softmax(v).reshape(4, 3), atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_conditionals_match_enumeration(seed):
    params, v = tiny(seed), scores(seed)
    for y in oracles.all_states(CrbmParams.neutral(2, 2, 2, 0)):
        y = y[0]
        np.testing.assert_allclose(hidden_posterior(y, params), oracles.conditional_hidden(y, v, params), atol=1e-10)
    for h in ([0, 0], [0, 1], [1, 0], [1, 1]):
        np.testing.assert_allclose(label_conditional(h, v, params), oracles.conditional_labels(h, v, params), atol=1e-10)


def test_joint_normalizes_and_matches_log_partition():
    params, v = tiny(5), scores(5)
    table = oracles.joint_table(v, params)
    assert sum(math.exp(lp) for _, _, lp in table) == pytest.approx(1.0, abs=1e-12)
    raw = [model_score(y.reshape(2, 2), h, v, params) for y, h, _ in table]
    assert log_partition(v, params) == pytest.approx(float(np.logaddexp.reduce(raw)), abs=1e-10)


# -- sampling --------------------------------------------------------------------

def test_gibbs_zero_params_is_uniform():
    params = CrbmParams.neutral(2, 2, 2, 2)
    params.calibration[:] = 0
    v = scores(0)
    rng = np.random.default_rng(11)
    y, h = np.zeros((2, 2), int), np.zeros(2)
    y_count, h_count, n = np.zeros(4), np.zeros(2), 100_000
    for _ in range(n):
        y, h = gibbs_sweep((y, h), v, params, rng)
        y_count += y.ravel()
        h_count += h
    np.testing.assert_allclose(y_count / n, 0.5, atol=0.01)
    np.testing.assert_allclose(h_count / n, 0.5, atol=0.01)


def test_gibbs_deterministic():
    params, v = tiny(2), scores(2)
    state = (np.zeros((2, 2), int), np.zeros(2))
    a = gibbs_sweep(state, v, params, np.random.default_rng(3))
    b = gibbs_sweep(state, v, params, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].shape == (2, 2) and set(np.unique(a[1])) <= {0.0, 1.0}


def test_predict_marginals_reduces_to_softmax():
    params = CrbmParams.neutral(3, 3, 4, 5)
    v = scores(4, 3, 3, 4)
    m = predict_marginals(v, params, burn_in=5, samples=20, seed=1)
    np.testing.assert_allclose(m, softmax(v), atol=0.01)


def test_predict_marginals_close_to_enumeration():
    params, v = tiny(7), scores(7)
    m = predict_marginals(v, params, burn_in=100, samples=20_000, seed=0)
    tv = 0.5 * np.abs(m - exact_marginals(v, params)).sum(axis=-1)
    assert tv.max() < 0.02
    np.testing.assert_allclose(exact_marginals(v, params).reshape(4, 2), oracles.label_marginals(v, params), atol=1e-12)


def test_predict_marginals_deterministic_and_validated():
    params, v = tiny(8), scores(8)
    a = predict_marginals(v, params, 10, 50, seed=4)
    assert a.tobytes() == predict_marginals(v, params, 10, 50, seed=4).tobytes()
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        predict_marginals(v, params, 10, 0)


# -- exact enumeration ------------------------------------------------------------

def test_exact_log_likelihood_zero_params():
    params = CrbmParams.neutral(2, 3, 3, 2)
    params.calibration[:] = 0
    y = np.zeros((2, 3), int)
    assert exact_log_likelihood(y, scores(0, 2, 3, 3), params) == pytest.approx(-6 * math.log(3), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_exact_log_likelihood_matches_brute_force(seed):
    params, v = tiny(seed, hidden_bias=seed != 1), scores(seed)
    y = np.random.default_rng(seed).integers(0, 2, (2, 2))
    assert exact_log_likelihood(y, v, params) == pytest.approx(oracles.log_likelihood(y, v, params), abs=1e-10)


def test_enumeration_size_limit():
    params = CrbmParams.neutral(4, 4, 3, 2)
    with pytest.raises(ValueError, match="too large"):
        exact_log_likelihood(np.zeros((4, 4), int), np.zeros((4, 4, 3)), params)


def test_exact_gradient_single_pixel_closed_form():
    params = CrbmParams(np.array([[0.7, -0.2], [0.1, 0.4]]), np.zeros((1, 3, 2)), np.array([[0.3, -0.5]]),
                        np.zeros(3), 1, 1)
    v = np.array([[[1.5, -0.5]]])
    g = exact_gradient([[1]], v, params)
    expect = np.array([0.0, 1.0]) - softmax(v[0, 0] @ params.calibration.T + params.location_bias[0])
    np.testing.assert_allclose(g.location_bias[0], expect, atol=1e-14)


@pytest.mark.parametrize("hidden_bias", [True, False])
def test_exact_gradient_matches_finite_differences(hidden_bias):
    params, v = tiny(9, 2, 3, 2, 2, hidden_bias), scores(9, 2, 3)
    y = np.array([[0, 1, 1], [1, 0, 0]])
    fd = oracles.finite_difference(lambda p: exact_log_likelihood(y, v, p), params)
    errs = oracles.group_relative_errors(exact_gradient(y, v, params), fd)
    assert max(errs.values()) < 1e-5, errs


# -- contrastive divergence ---------------------------------------------------------

def test_cd_gradient_zero_params_single_pixel():
    params = CrbmParams(np.zeros((2, 2)), np.zeros((1, 3, 2)), np.zeros((1, 2)), np.zeros(3), 1, 1)
    v = np.array([[[0.8, -1.3]]])
    g = cd_gradient([([[0]], v)], params, CrbmTrainConfig(), np.random.default_rng(0))
    np.testing.assert_allclose(g.location_bias, [[0.5, -0.5]], atol=1e-15)
    # positive phase y (x) v minus the exactly mixed negative phase 0.5 * v per row
    np.testing.assert_allclose(g.calibration, np.outer([1, 0], v[0, 0]) - 0.5 * v[0, 0], atol=1e-15)
    np.testing.assert_allclose(g.interactions, 0.0, atol=1e-15)
    np.testing.assert_allclose(g.hidden_bias, 0.0, atol=1e-15)


def test_cd_gradient_rejects_empty_batch():
    with pytest.raises(ValueError):
        cd_gradient([], tiny(), CrbmTrainConfig(), np.random.default_rng(0))


def test_cd_gradient_per_example_streams():
    """An example's contribution does not depend on its batch neighbours."""
    params = tiny(3)
    data = [(np.random.default_rng(i).integers(0, 2, (2, 2)), scores(i)) for i in range(3)]
    cfg = CrbmTrainConfig(cd_steps=3)
    rngs = lambda: [np.random.default_rng([1, i]) for i in range(3)]
    whole = cd_gradient(data, params, cfg, rngs())
    parts = [cd_gradient([d], params, cfg, [r]) for d, r in zip(data, rngs())]
    for name, g in whole.groups().items():
        np.testing.assert_allclose(g, sum(p.groups()[name] for p in parts) / 3, atol=1e-14)


# -- training ------------------------------------------------------------------------

def _tiny_dataset():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, (2, 2))
    v = rng.normal(size=(2, 2, 2))
    return [(y, v)] * 6


def test_train_increases_exact_likelihood():
    data = _tiny_dataset()
    y, v = data[0]
    cfg = CrbmTrainConfig(epochs=30, minibatch=3, num_hidden=2, learning_rate=0.05, seed=1)
    trace = []
    train(data, cfg, callback=lambda e, p, _: trace.append(exact_log_likelihood(y, v, p)))
    start = exact_log_likelihood(y, v, initialize(2, 2, 2, cfg))
    assert trace[-1] > start + 0.5
    assert np.mean(trace[-5:]) > np.mean(trace[:5])


def test_train_deterministic_and_zero_epochs():
    data = _tiny_dataset()
    cfg = CrbmTrainConfig(epochs=3, minibatch=4, num_hidden=3, seed=5)
    a, log_a = train(data, cfg)
    b, log_b = train(data, cfg)
    assert a.to_vector().tobytes() == b.to_vector().tobytes()
    assert format_log(log_a) == format_log(log_b)
    assert [e for e, _ in log_a] == [0, 1, 2] and all(np.isfinite(p) for _, p in log_a)
    zero = CrbmTrainConfig(epochs=0, num_hidden=3, seed=5)
    p0, log0 = train(data, zero)
    assert log0 == []
    init = initialize(2, 2, 2, zero)
    assert p0.to_vector().tobytes() == init.to_vector().tobytes()
    np.testing.assert_array_equal(init.calibration, np.eye(2))
    np.testing.assert_array_equal(init.location_bias, 0.0)
    np.testing.assert_array_equal(init.hidden_bias, 0.0)


def test_train_initial_interaction_scale():
    init = initialize(8, 8, 5, CrbmTrainConfig(seed=0))
    assert init.interactions.shape == (64, 50, 5)
    assert init.interactions.std() == pytest.approx(0.01, rel=0.02)


def test_train_rejects_inconsistent_dataset():
    data = [(np.zeros((2, 2), int), np.zeros((2, 2, 2))), (np.zeros((2, 3), int), np.zeros((2, 3, 2)))]
    with pytest.raises(ValueError):
        train(data, CrbmTrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train([], CrbmTrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        CrbmTrainConfig(cd_steps=0)
    with pytest.raises(ValueError):
        CrbmTrainConfig(learning_rate=0)


# -- refinement -------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_rbm_refine_neutral_preserves_argmax(h, w, k, seed):
    v = np.random.default_rng(seed).normal(scale=3.0, size=(h, w, k))
    params = CrbmParams.neutral(4, 4, k, 3)
    out = rbm_refine(v, params, InferenceConfig(burn_in=2, samples=5, seed=seed))
    assert out.shape == v.shape
    np.testing.assert_array_equal(argmax_labels(out), argmax_labels(v))
    np.testing.assert_allclose(softmax(out).sum(axis=-1), 1.0, atol=1e-12)


def test_rbm_refine_at_grid_is_log_marginals():
    params, v = tiny(1), scores(1)
    cfg = InferenceConfig(burn_in=5, samples=30, seed=2)
    np.testing.assert_allclose(np.exp(rbm_refine(v, params, cfg)),
                               predict_marginals(v, params, 5, 30, seed=2), atol=1e-12)
