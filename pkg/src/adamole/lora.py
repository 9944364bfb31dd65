"""A single low-rank expert: ``(alpha / rank) * B @ A @ x``."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .numeric import Parameter, gaussian_init, zeros


class LoraExpert:
    """Rank-``r`` update for a ``d x k`` weight.

    ``A`` starts Gaussian with std ``1/sqrt(k)`` and ``B`` starts at zero, so a
    fresh expert outputs exactly zero. Inputs are batches of shape ``(T, k)``.
    """

    def __init__(self, d: int, k: int, rank: int, alpha: float, seed: int = 0,
                 dropout_rate: float = 0.0, name: str = "expert"):
        if not (1 <= rank <= min(d, k)):
            raise ConfigError(f"rank must lie in [1, min(d, k)] = [1, {min(d, k)}], got {rank}")
        if not alpha > 0:
            raise ConfigError(f"alpha must be positive, got {alpha}")
        if not (0.0 <= dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.d, self.k, self.rank, self.alpha = d, k, rank, float(alpha)
        self.dropout_rate = float(dropout_rate)
        self.a = Parameter(f"{name}.a", gaussian_init(rank, k, 1.0 / math.sqrt(k), seed, f"{name}.a"))
        self.b = Parameter(f"{name}.b", zeros(d, rank))
        self._cache = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self):
        return [self.a, self.b]

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """``x``: ``(T, k)``. Dropout is applied only when ``rng`` is given."""
        if x.ndim != 2 or x.shape[1] != self.k:
            raise ShapeError(f"expert expects (T, {self.k}) input, got {x.shape}")
        mask = None
        if rng is not None and self.dropout_rate > 0.0:
            keep = 1.0 - self.dropout_rate
            mask = (rng.random(x.shape) < keep) / keep
            x = x * mask
        ax = x @ self.a.value.T
        out = self.scaling * (ax @ self.b.value.T)
        self._cache = (x, ax, mask)
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("expert backward called before forward")
        x, ax, mask = self._cache
        if upstream.shape != (x.shape[0], self.d):
            raise ShapeError(f"expert upstream must be {(x.shape[0], self.d)}, got {upstream.shape}")
        g = self.scaling * upstream
        self.b.accumulate(g.T @ ax)
        g_ax = g @ self.b.value
        self.a.accumulate(g_ax.T @ x)
        grad_x = g_ax @ self.a.value
        if mask is not None:
            grad_x = grad_x * mask
        return grad_x


def init_expert(d: int, k: int, r: int, alpha: float, seed: int, **kw) -> LoraExpert:
    return LoraExpert(d, k, r, alpha, seed=seed, **kw)


def expert_forward(e: LoraExpert, x: np.ndarray, rng=None) -> np.ndarray:
    """Vector-or-batch convenience wrapper around :meth:`LoraExpert.forward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return e.forward(x[None, :], rng)[0]
    return e.forward(x, rng)


def expert_backward(e: LoraExpert, upstream: np.ndarray) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        return e.backward(upstream[None, :])[0]
    return e.backward(upstream)
