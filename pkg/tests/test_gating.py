import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adamole.errors import ConfigError, ShapeError
from adamole.gating import (
    GateNetwork,
    ThresholdNetwork,
    adaptive_weights,
    compute_threshold,
    gate_probs,
    load_balance_grad,
    load_balance_loss,
    mix_backward,
    threshold_weights,
    topk_weights,
)
from adamole.numeric import softmax
from adamole.oracle import brute_force_adaptive, brute_force_topk, finite_diff, relative_error

P3 = np.array([0.5, 0.3, 0.2])


@st.composite
def prob_vectors(draw, max_n=10):
    n = draw(st.integers(1, max_n))
    logits = draw(arrays(np.float64, n, elements=st.floats(-4, 4)))
    return softmax(logits)


def test_gate_probs_examples():
    g = GateNetwork(4, 3)
    g.w_g.value[...] = 0.0
    np.testing.assert_array_equal(gate_probs(g, [1.0, -2.0, 3.0]), [0.25] * 4)
    g2 = GateNetwork(2, 1)
    g2.w_g.value[...] = [[math.log(2.0)], [0.0]]
    np.testing.assert_allclose(gate_probs(g2, [1.0]), [2 / 3, 1 / 3], atol=1e-15, rtol=0)


@given(st.integers(0, 10**6))
def test_gate_max_is_at_least_mean(seed):
    g = GateNetwork(5, 3, seed=seed)
    x = np.random.default_rng(seed).uniform(-2, 2, 3)
    assert gate_probs(g, x).max() >= 1 / 5


def test_threshold_examples():
    t = ThresholdNetwork(3, tau_max=0.5)
    assert compute_threshold(t, [1.0, 2.0, 3.0]) == 0.25
    t.b_tau.value[...] = 4.0
    t.tau_max = 0.125
    # 0.125 / (1 + e^-4), evaluated with mpmath
    assert compute_threshold(t, [0.0, 0.0, 0.0]) == pytest.approx(0.12275172375473856, abs=1e-15)


@given(st.integers(2, 16), st.floats(-30, 30))
def test_threshold_stays_below_one_over_n(n, bias):
    t = ThresholdNetwork(2, tau_max=1 / n)
    t.b_tau.value[...] = bias
    tau = compute_threshold(t, [0.5, -0.5])
    assert 0.0 <= tau < 1 / n


def test_threshold_rejects_bad_tau_max():
    with pytest.raises(ConfigError):
        ThresholdNetwork(2, 0.0)
    with pytest.raises(ConfigError):
        ThresholdNetwork(2, 1.5)


def test_topk_examples():
    np.testing.assert_allclose(topk_weights(P3, 2).weights, [0.625, 0.375, 0.0], atol=1e-15, rtol=0)
    np.testing.assert_array_equal(topk_weights(P3, 3).weights, P3 / P3.sum())
    np.testing.assert_array_equal(topk_weights(P3, 1).weights, [1.0, 0.0, 0.0])
    # ties go to the lowest index
    np.testing.assert_array_equal(topk_weights([0.25, 0.25, 0.25, 0.25], 2).active_mask,
                                  [True, True, False, False])
    with pytest.raises(ConfigError):
        topk_weights(P3, 4)


@settings(max_examples=200)
@given(prob_vectors(), st.data())
def test_topk_equals_sort_oracle(p, data):
    k = data.draw(st.integers(1, len(p)))
    mw = topk_weights(p, k)
    w, mask = brute_force_topk(p, k)
    assert mw.weights.tolist() == w
    assert mw.active_mask.tolist() == mask


def test_threshold_weights_examples():
    np.testing.assert_allclose(threshold_weights(P3, 0.25).weights, [0.625, 0.375, 0.0], atol=1e-15)
    np.testing.assert_allclose(threshold_weights(P3, 0.0).weights, P3, atol=1e-15)
    none = threshold_weights(P3, 0.6)
    assert none.active_count == 0 and not none.weights.any()


def test_adaptive_weights_examples():
    np.testing.assert_allclose(adaptive_weights(P3, 0.25).weights, [5 / 6, 1 / 6, 0.0], atol=1e-15)
    np.testing.assert_allclose(adaptive_weights(P3, 0.0).weights, P3, atol=1e-15)
    single = adaptive_weights(P3, 0.4)
    np.testing.assert_array_equal(single.weights, [1.0, 0.0, 0.0])


def test_adaptive_boundary_expert_counts_but_contributes_nothing():
    mw = adaptive_weights(P3, 0.3)
    assert mw.active_count == 2
    assert mw.weights[1] == 0.0 and mw.weights[0] == 1.0
    all_tied = adaptive_weights([0.5, 0.5], 0.5)
    assert all_tied.active_count == 2 and not all_tied.weights.any()


@settings(max_examples=200)
@given(prob_vectors(), st.floats(0, 1))
def test_adaptive_matches_scalar_reference(p, tau):
    np.testing.assert_allclose(adaptive_weights(p, tau).weights, brute_force_adaptive(p, tau),
                               atol=1e-12, rtol=0)


@settings(max_examples=300)
@given(prob_vectors(), st.floats(0, 1))
def test_mixing_rule_invariants(p, tau):
    for mw in (threshold_weights(p, tau), adaptive_weights(p, tau)):
        assert np.all(mw.weights >= 0)
        assert np.all(mw.weights[~mw.active_mask] == 0)
        if mw.active_count > 0 and mw.denom > 1e-12:
            assert abs(mw.weights.sum() - 1) <= 1e-10


@settings(max_examples=300)
@given(prob_vectors(), st.floats(0, 1), st.floats(0, 1))
def test_active_count_monotone_in_tau(p, t1, t2):
    lo, hi = sorted((t1, t2))
    assert threshold_weights(p, lo).active_count >= threshold_weights(p, hi).active_count
    assert adaptive_weights(p, lo).active_count >= adaptive_weights(p, hi).active_count


@settings(max_examples=300)
@given(prob_vectors(), st.floats(0, 1))
def test_one_over_n_guarantees_an_active_expert(p, frac):
    tau = frac / len(p)
    assert threshold_weights(p, tau).active_count >= 1
    assert adaptive_weights(p, tau).active_count >= 1


@settings(max_examples=300)
@given(prob_vectors(), st.floats(0, 1))
def test_adaptive_preserves_argmax(p, frac):
    srt = np.sort(p)
    assume(len(p) == 1 or srt[-1] - srt[-2] > 1e-9)
    tau = frac * p.max()
    mw = adaptive_weights(p, tau)
    assume(mw.denom > 1e-12)
    assert np.argmax(mw.weights) == np.argmax(p)


def test_adaptive_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 50:
        p = softmax(rng.uniform(-2, 2, 5))
        tau = float(rng.uniform(0, p.max()))
        if np.min(np.abs(p - tau)) <= 1e-3:
            continue
        c = rng.normal(size=5)
        grad_p, grad_tau = mix_backward(adaptive_weights(p, tau), c)
        tau_arr = np.array([tau])
        num_p, num_tau = finite_diff(lambda: float(c @ adaptive_weights(p, tau_arr[0]).weights), [p, tau_arr])
        assert relative_error(grad_p, num_p) <= 1e-6
        assert relative_error(grad_tau, num_tau) <= 1e-6
        checked += 1


def test_topk_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.uniform(0.05, 1, 6)
        c = rng.normal(size=6)
        grad_p, grad_tau = mix_backward(topk_weights(p, 3), c)
        assert not grad_tau.any()
        (num,) = finite_diff(lambda: float(c @ topk_weights(p, 3).weights), [p])
        assert relative_error(grad_p, num) <= 1e-6


def test_balance_loss_examples():
    n, t = 4, 6
    uniform = np.full((t, n), 1 / n)
    assert load_balance_loss(uniform, np.ones((t, n), bool)) == pytest.approx(1.0, abs=1e-12)
    onehot = np.zeros((t, n))
    onehot[:, 0] = 1.0
    assert load_balance_loss(onehot, onehot.astype(bool)) == pytest.approx(n, abs=1e-12)
    p1 = np.ones((3, 1))
    assert load_balance_loss(p1, np.ones((3, 1), bool)) == 1.0
    assert load_balance_loss(uniform, np.zeros((t, n), bool)) == 0.0
    with pytest.raises(ShapeError):
        load_balance_loss(uniform, np.ones((t, n + 1), bool))


def test_balance_grad_holds_shares_constant():
    rng = np.random.default_rng(4)
    p = softmax(rng.normal(size=(7, 4)))
    mask = p > 0.2
    (num,) = finite_diff(lambda: load_balance_loss(p, mask), [p])
    assert relative_error(load_balance_grad(p, mask), num) <= 1e-6
