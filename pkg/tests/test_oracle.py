import numpy as np
import pytest

from adamole import gating
from adamole.gradcheck import check_layer, run_gradcheck
from adamole.moe_layer import MixMode
from adamole.oracle import (
    GradReport,
    brute_force_adaptive,
    brute_force_topk,
    finite_diff,
    group_floor,
    relative_error,
)


def test_finite_diff_closed_forms():
    theta = np.array([3.0])
    (g,) = finite_diff(lambda: float(theta[0] ** 2), [theta])
    assert abs(g[0] - 6.0) <= 1e-8
    w = np.array([1.5, -2.0, 0.25])
    x = np.zeros(3)
    (g,) = finite_diff(lambda: float(w @ x), [x])
    np.testing.assert_allclose(g, w, atol=1e-10, rtol=0)
    np.testing.assert_array_equal(x, 0.0)


def test_finite_diff_rejects_non_finite():
    t = np.array([0.0])
    with pytest.raises(ArithmeticError):
        finite_diff(lambda: 1.0 / t[0] if t[0] < 0 else np.inf, [t])


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    # the floor keeps a tiny tensor's rounding noise from dominating
    assert relative_error([1e-12], [2e-12], floor=1.0) == pytest.approx(1e-12)
    assert group_floor([np.array([1.0, -4.0]), np.array([2.0])]) == 4e-3


def test_grad_report_tracks_worst():
    rep = GradReport()
    rep.add("a", np.array([1.0, 2.0]), np.array([1.0, 2.1]))
    rep.add("b", np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]))
    name, err, idx = rep.worst()
    assert name == "a" and idx == (1,) and err == pytest.approx(0.1 / 2.1)
    other = GradReport()
    other.add("a", np.array([1.0]), np.array([2.0]))
    rep.merge(other, "")
    assert rep.errors["a"] == 0.5


def test_brute_force_examples():
    assert brute_force_topk([0.5, 0.3, 0.2], 1) == ([1.0, 0.0, 0.0], [True, False, False])
    assert brute_force_topk([0.25] * 4, 2)[1] == [True, True, False, False]
    assert brute_force_adaptive([0.5, 0.5], 0.5) == [0.0, 0.0]
    np.testing.assert_allclose(brute_force_adaptive([0.5, 0.3, 0.2], 0.25), [5 / 6, 1 / 6, 0.0])


def test_gradcheck_groups_cover_every_layer_type():
    reports = run_gradcheck(seed=0)
    assert set(reports) == {"lora_expert", "gate", "threshold", "layer[lora]", "layer[topk]",
                            "layer[fixed]", "layer[adamole]", "attention_block", "model_loss",
                            "router_model_loss"}
    names = set().union(*(r.errors for r in reports.values()))
    assert any("w_tau" in n for n in names) and any("w_g" in n for n in names)
    assert all(r.max_error <= 1e-5 for r in reports.values())


def test_gradcheck_catches_a_broken_backward(monkeypatch):
    real = gating.mix_backward

    def wrong_sign_tau(mw, grad_w):
        grad_p, grad_tau = real(mw, grad_w)
        return grad_p, -grad_tau

    monkeypatch.setattr("adamole.moe_layer.mix_backward", wrong_sign_tau)
    rep = check_layer(np.random.default_rng(0), MixMode.adaptive(1 / 3))
    assert rep.max_error > 1e-2
    assert "threshold" in rep.worst()[0]
