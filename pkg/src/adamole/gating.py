"""Routers and mixing rules.

All mixing rules take gate probabilities ``p`` of shape ``(N,)`` or ``(T, N)``
and return a :class:`MixWeights`. Selection indicators are treated as constants
in the backward pass; gradients flow only through the renormalized values
(``p_i`` for top-k and fixed thresholds, ``p_i - tau`` for the adaptive rule).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .numeric import Parameter, gaussian_init, sigmoid, softmax, softmax_backward, zeros

ADAPTIVE_EPS = 1e-12
GATE_INIT_STD = 0.01


@dataclass
class MixWeights:
    weights: np.ndarray
    active_mask: np.ndarray
    denom: np.ndarray
    shifted: bool = False  # True when weights are built from p - tau

    @property
    def active_count(self):
        c = self.active_mask.sum(axis=-1)
        return int(c) if np.ndim(c) == 0 else c

    @property
    def valid(self) -> np.ndarray:
        """Rows whose weights were actually normalized (non-degenerate denominator)."""
        return self.denom > (ADAPTIVE_EPS if self.shifted else 0.0)


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise ShapeError(f"probabilities must be (N,) or (T, N), got {p.shape}")
    return p


def _tau_column(tau, p: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise ConfigError("threshold must be non-negative")
    if tau.ndim == 0:
        return np.broadcast_to(tau, p.shape[:-1])[..., None]
    if tau.shape != p.shape[:-1]:
        raise ShapeError(f"tau shape {tau.shape} does not match probabilities {p.shape}")
    return tau[..., None]


def _renormalize(values: np.ndarray, mask: np.ndarray, eps: float, shifted: bool) -> MixWeights:
    num = np.where(mask, values, 0.0)
    # sequential index-order sum, so results match a scalar reference bit for bit
    denom = np.cumsum(num, axis=-1)[..., -1]
    ok = denom > eps
    safe = np.where(ok, denom, 1.0)
    weights = np.where(ok[..., None], num / safe[..., None], 0.0)
    return MixWeights(weights, mask, denom, shifted)


def topk_weights(p, k: int) -> MixWeights:
    """Keep the ``k`` largest probabilities (lowest index wins ties) and renormalize."""
    p = _check_probs(p)
    n = p.shape[-1]
    if not (1 <= k <= n):
        raise ConfigError(f"K must lie in [1, {n}], got {k}")
    order = np.argsort(-p, axis=-1, kind="stable")
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return _renormalize(p, mask, 0.0, shifted=False)


def threshold_weights(p, tau) -> MixWeights:
    """Experts with ``p_i >= tau``, weighted by renormalized ``p_i``."""
    p = _check_probs(p)
    t = _tau_column(tau, p)
    return _renormalize(p, p >= t, 0.0, shifted=False)


def adaptive_weights(p, tau) -> MixWeights:
    """Experts with ``p_i >= tau``, weighted by renormalized ``p_i - tau``.

    When the shifted mass is at most ``ADAPTIVE_EPS`` every weight is zero,
    though ``active_count`` still reports the indicator count.
    """
    p = _check_probs(p)
    t = _tau_column(tau, p)
    return _renormalize(p - t, p >= t, ADAPTIVE_EPS, shifted=True)


def mix_backward(mw: MixWeights, grad_w):
    """Maps dL/dweights to ``(dL/dp, dL/dtau)``.

    ``dL/dtau`` is zero unless the weights came from :func:`adaptive_weights`.
    """
    g = np.asarray(grad_w, dtype=np.float64)
    if g.shape != mw.weights.shape:
        raise ShapeError(f"grad shape {g.shape} vs weights {mw.weights.shape}")
    ok = mw.valid
    safe = np.where(ok, mw.denom, 1.0)
    inner = np.sum(g * mw.weights, axis=-1, keepdims=True)
    grad_q = np.where(mw.active_mask & ok[..., None], (g - inner) / safe[..., None], 0.0)
    if mw.shifted:
        grad_tau = -grad_q.sum(axis=-1)
    else:
        grad_tau = np.zeros(grad_q.shape[:-1])
    return grad_q, grad_tau


# -- balance loss ------------------------------------------------------------

def _balance_terms(p, mask):
    p = np.asarray(p, dtype=np.float64)
    mask = np.asarray(mask)
    if p.ndim != 2 or p.shape != mask.shape:
        raise ShapeError(f"balance loss wants matching (T, N) arrays, got {p.shape} and {mask.shape}")
    if p.shape[0] < 1:
        raise ShapeError("balance loss needs at least one routed input")
    counts = mask.sum(axis=0).astype(np.float64)
    total = counts.sum()
    f = counts / total if total > 0 else np.zeros_like(counts)
    return p, f


def load_balance_loss(p, mask) -> float:
    """``N * sum_i f_i * P_i`` with ``f`` the share of activations, ``P`` the mean probability."""
    p, f = _balance_terms(p, mask)
    n = p.shape[1]
    return float(n * np.dot(f, p.mean(axis=0)))


def load_balance_grad(p, mask) -> np.ndarray:
    """d(loss)/dp with the activation shares held constant."""
    p, f = _balance_terms(p, mask)
    t, n = p.shape
    return np.broadcast_to(n * f / t, p.shape).copy()


# -- networks ----------------------------------------------------------------

class GateNetwork:
    """``p = softmax(W_g x)`` with no bias."""

    def __init__(self, n_experts: int, k: int, seed: int = 0, name: str = "gate"):
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        self.n_experts, self.k = n_experts, k
        self.w_g = Parameter(f"{name}.w_g", gaussian_init(n_experts, k, GATE_INIT_STD, seed, f"{name}.w_g"),
                             decay=True)
        self._cache = None

    def parameters(self):
        return [self.w_g]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.k:
            raise ShapeError(f"gate expects (T, {self.k}) input, got {x.shape}")
        p = softmax(x @ self.w_g.value.T)
        self._cache = (x, p)
        return p

    def backward(self, grad_p: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("gate backward called before forward")
        x, p = self._cache
        g_logits = softmax_backward(p, grad_p)
        self.w_g.accumulate(g_logits.T @ x)
        return g_logits @ self.w_g.value


class ThresholdNetwork:
    """``tau = tau_max * sigmoid(W_tau x + b_tau)``; starts at ``tau_max / 2``."""

    def __init__(self, k: int, tau_max: float, name: str = "threshold"):
        if not (0.0 < tau_max <= 1.0):
            raise ConfigError(f"tau_max must lie in (0, 1], got {tau_max}")
        self.k = k
        self.tau_max = float(tau_max)
        self.w_tau = Parameter(f"{name}.w_tau", zeros(1, k), decay=True)
        self.b_tau = Parameter(f"{name}.b_tau", np.zeros(1), decay=True)
        self._cache = None

    def parameters(self):
        return [self.w_tau, self.b_tau]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.k:
            raise ShapeError(f"threshold expects (T, {self.k}) input, got {x.shape}")
        s = np.asarray(sigmoid(x @ self.w_tau.value[0] + self.b_tau.value[0]))
        self._cache = (x, s)
        return self.tau_max * s

    def backward(self, grad_tau: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("threshold backward called before forward")
        x, s = self._cache
        g_z = grad_tau * self.tau_max * s * (1.0 - s)
        self.w_tau.accumulate((g_z @ x)[None, :])
        self.b_tau.accumulate(np.array([g_z.sum()]))
        return np.outer(g_z, self.w_tau.value[0])


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def gate_probs(g: GateNetwork, x) -> np.ndarray:
    xb, single = _batch(x)
    p = g.forward(xb)
    return p[0] if single else p


def compute_threshold(t: ThresholdNetwork, x):
    xb, single = _batch(x)
    tau = t.forward(xb)
    return float(tau[0]) if single else tau
