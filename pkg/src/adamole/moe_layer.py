"""Frozen linear map plus a gated mixture of LoRA experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .gating import (
    GateNetwork,
    MixWeights,
    ThresholdNetwork,
    adaptive_weights,
    load_balance_grad,
    load_balance_loss,
    mix_backward,
    threshold_weights,
    topk_weights,
)
from .lora import LoraExpert
from .numeric import Parameter, gaussian_init

MODE_KINDS = ("lora", "topk", "fixed", "adamole")


@dataclass(frozen=True)
class MixMode:
    """How expert outputs are combined.

    ``lora``: one expert, weight 1. ``topk``: top-``k`` gate probabilities.
    ``fixed``: every expert with ``p_i >= tau``. ``adamole``: learned
    threshold in ``(0, tau_max)`` with ``p_i - tau`` weighting.
    """

    kind: str
    k: int | None = None
    tau: float | None = None
    tau_max: float | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ConfigError(f"unknown mixing mode {self.kind!r}; choose from {MODE_KINDS}")
        if self.kind == "topk" and (self.k is None or self.k < 1):
            raise ConfigError("topk mode needs k >= 1")
        if self.kind == "fixed" and (self.tau is None or not 0.0 <= self.tau <= 1.0):
            raise ConfigError("fixed mode needs tau in [0, 1]")
        if self.kind == "adamole" and (self.tau_max is None or not 0.0 < self.tau_max <= 1.0):
            raise ConfigError("adamole mode needs tau_max in (0, 1]")

    @classmethod
    def single_lora(cls):
        return cls("lora")

    @classmethod
    def top_k(cls, k: int):
        return cls("topk", k=k)

    @classmethod
    def fixed(cls, tau: float):
        return cls("fixed", tau=tau)

    @classmethod
    def adaptive(cls, tau_max: float):
        return cls("adamole", tau_max=tau_max)

    def to_dict(self) -> dict:
        return {k: v for k, v in
                (("kind", self.kind), ("k", self.k), ("tau", self.tau), ("tau_max", self.tau_max))
                if v is not None}

    @classmethod
    def from_dict(cls, d) -> "MixMode":
        if isinstance(d, str):
            d = {"kind": d}
        unknown = set(d) - {"kind", "k", "tau", "tau_max"}
        if unknown:
            raise ConfigError(f"unknown mode keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ActivationRecord:
    """Routing outcome for a batch of tokens (or one token when unbatched)."""

    p: np.ndarray
    tau: np.ndarray | float | None
    weights: MixWeights


def count_active(rec: ActivationRecord):
    return rec.weights.active_count


class AdaMoleLinear:
    """``h = W0 x + sum_i w_i(x) * E_i(x)`` over ``N`` LoRA experts.

    ``W0`` (``d_out x d_in``) is frozen. Forward takes ``(d_in,)`` or
    ``(T, d_in)`` inputs; each row is routed independently.
    """

    def __init__(self, d_out: int, d_in: int, n_experts: int, rank: int, alpha: float,
                 mode: MixMode, seed: int = 0, w0: np.ndarray | None = None,
                 dropout_rate: float = 0.0, name: str = "layer"):
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        if mode.kind == "lora" and n_experts != 1:
            raise ConfigError(f"single-LoRA mode requires exactly one expert, got {n_experts}")
        if mode.kind == "topk" and mode.k > n_experts:
            raise ConfigError(f"top-k with k={mode.k} exceeds {n_experts} experts")
        self.d_out, self.d_in, self.n_experts = d_out, d_in, n_experts
        self.mode = mode
        self.name = name
        if w0 is None:
            w0 = gaussian_init(d_out, d_in, 1.0 / np.sqrt(d_in), seed, f"{name}.w0")
        w0 = np.asarray(w0, dtype=np.float64)
        if w0.shape != (d_out, d_in):
            raise ShapeError(f"w0 must be {(d_out, d_in)}, got {w0.shape}")
        self.w0 = Parameter(f"{name}.w0", w0, trainable=False)
        self.experts = [LoraExpert(d_out, d_in, rank, alpha, seed=seed, dropout_rate=dropout_rate,
                                   name=f"{name}.expert{i}") for i in range(n_experts)]
        self.gate = None if mode.kind == "lora" else GateNetwork(n_experts, d_in, seed, f"{name}.gate")
        self.threshold = (ThresholdNetwork(d_in, mode.tau_max, f"{name}.threshold")
                          if mode.kind == "adamole" else None)
        self._cache = None

    def parameters(self) -> list[Parameter]:
        ps = [self.w0]
        for e in self.experts:
            ps.extend(e.parameters())
        if self.gate is not None:
            ps.extend(self.gate.parameters())
        if self.threshold is not None:
            ps.extend(self.threshold.parameters())
        return ps

    def adapter_parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()]

    def _route(self, x: np.ndarray):
        t = x.shape[0]
        if self.mode.kind == "lora":
            p = np.ones((t, 1))
            mw = MixWeights(np.ones((t, 1)), np.ones((t, 1), dtype=bool), np.ones(t))
            return p, None, mw
        p = self.gate.forward(x)
        if self.mode.kind == "topk":
            return p, None, topk_weights(p, self.mode.k)
        if self.mode.kind == "fixed":
            return p, None, threshold_weights(p, self.mode.tau)
        tau = self.threshold.forward(x)
        return p, tau, adaptive_weights(p, tau)

    def forward(self, x, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.d_in:
            raise ShapeError(f"{self.name} expects inputs of width {self.d_in}, got {x.shape}")
        p, tau, mw = self._route(xb)
        h = xb @ self.w0.value.T
        outs = []
        for i, e in enumerate(self.experts):
            out = e.forward(xb, rng)
            outs.append(out)
            h = h + mw.weights[:, i:i + 1] * out
        self._cache = (xb, p, tau, mw, outs, single)
        if single:
            rec = ActivationRecord(p[0], None if tau is None else float(tau[0]),
                                   MixWeights(mw.weights[0], mw.active_mask[0], mw.denom[0], mw.shifted))
            return h[0], rec
        return h, ActivationRecord(p, tau, mw)

    def balance_loss(self) -> float:
        if self._cache is None:
            raise StateError(f"{self.name}: balance loss requested before forward")
        _, p, _, mw, _, _ = self._cache
        return load_balance_loss(p, mw.active_mask)

    def backward(self, grad_h, aux_coeff: float = 0.0) -> np.ndarray:
        """Accumulates parameter grads; returns dL/dx.

        ``aux_coeff`` adds the gradient of ``aux_coeff * balance_loss()``.
        """
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        xb, p, tau, mw, outs, single = self._cache
        g = np.asarray(grad_h, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != (xb.shape[0], self.d_out):
            raise ShapeError(f"{self.name}: upstream must be {(xb.shape[0], self.d_out)}, got {g.shape}")
        grad_x = g @ self.w0.value
        grad_w = np.empty_like(mw.weights)
        for i, e in enumerate(self.experts):
            grad_w[:, i] = np.sum(g * outs[i], axis=1)
            grad_x += e.backward(mw.weights[:, i:i + 1] * g)
        if self.gate is not None:
            grad_p, grad_tau = mix_backward(mw, grad_w)
            if aux_coeff:
                grad_p = grad_p + aux_coeff * load_balance_grad(p, mw.active_mask)
            grad_x += self.gate.backward(grad_p)
            if self.threshold is not None:
                grad_x += self.threshold.backward(grad_tau)
        return grad_x[0] if single else grad_x


def layer_forward(layer: AdaMoleLinear, x, rng=None):
    return layer.forward(x, rng)


def layer_backward(layer: AdaMoleLinear, upstream, aux_coeff: float = 0.0):
    return layer.backward(upstream, aux_coeff)


def adapter_param_count(layer: AdaMoleLinear) -> int:
    """Size of all ``(A_i, B_i)`` pairs, excluding routers: ``N * r * (d_in + d_out)``."""
    return sum(p.size for p in layer.adapter_parameters())
