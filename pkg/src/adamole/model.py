"""Toy models whose frozen linear maps are wrapped in :class:`AdaMoleLinear`.

``ToyModel`` is a pre-norm single-head transformer classifier with adapted
q/k/v/o projections. ``RoutedClassifier`` is a single adapted layer feeding a
frozen random readout, used for the cluster-routing experiments.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .moe_layer import ActivationRecord, AdaMoleLinear, MixMode
from .numeric import Parameter, gaussian_init, softmax, softmax_backward

PROJECTIONS = ("q", "k", "v", "o")
LN_EPS = 1e-5


@dataclass
class ToyModelConfig:
    n_layers: int = 4
    d_model: int = 32
    vocab_size: int = 64
    seq_len: int = 16
    n_classes: int = 4
    n_experts: int = 8
    lora_rank: int = 4
    lora_alpha: float = 16.0
    mode: MixMode = field(default_factory=lambda: MixMode.adaptive(1 / 8))
    seed: int = 0
    dropout: float = 0.0

    def validate(self) -> "ToyModelConfig":
        if self.d_model < 4:
            raise ConfigError(f"d_model must be >= 4, got {self.d_model}")
        if self.seq_len < 1 or self.n_layers < 1 or self.vocab_size < 2 or self.n_classes < 2:
            raise ConfigError("n_layers, seq_len >= 1 and vocab_size, n_classes >= 2 required")
        if self.n_experts < 1 or self.lora_rank < 1:
            raise ConfigError("n_experts and lora_rank must be >= 1")
        if not isinstance(self.mode, MixMode):
            self.mode = MixMode.from_dict(self.mode)
        if self.mode.kind == "lora" and self.n_experts != 1:
            raise ConfigError("lora mode uses a single expert; set n_experts=1 and fold N*r into lora_rank")
        return self

    @property
    def total_rank(self) -> int:
        return self.n_experts * self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.to_dict()
        return d


def layer_norm(x):
    """Normalizes over the last axis (no affine terms)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    y = xc * inv
    return y, (y, inv)


def layer_norm_backward(cache, g):
    y, inv = cache
    return inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))


class AttentionBlock:
    def __init__(self, cfg: ToyModelConfig, index: int):
        d = cfg.d_model
        self.d = d
        pre = f"blocks.{index}"
        self.proj = {
            name: AdaMoleLinear(d, d, cfg.n_experts, cfg.lora_rank, cfg.lora_alpha, cfg.mode,
                                seed=cfg.seed, dropout_rate=cfg.dropout, name=f"{pre}.{name}")
            for name in PROJECTIONS
        }
        h = 2 * d
        self.w1 = Parameter(f"{pre}.ffn.w1", gaussian_init(h, d, d ** -0.5, cfg.seed, f"{pre}.ffn.w1"), trainable=False)
        self.b1 = Parameter(f"{pre}.ffn.b1", gaussian_init(1, h, 0.1, cfg.seed, f"{pre}.ffn.b1")[0], trainable=False)
        self.w2 = Parameter(f"{pre}.ffn.w2", gaussian_init(d, h, h ** -0.5, cfg.seed, f"{pre}.ffn.w2"), trainable=False)
        self.b2 = Parameter(f"{pre}.ffn.b2", gaussian_init(1, d, 0.1, cfg.seed, f"{pre}.ffn.b2")[0], trainable=False)
        self._cache = None

    def parameters(self):
        ps = []
        for name in PROJECTIONS:
            ps.extend(self.proj[name].parameters())
        return ps + [self.w1, self.b1, self.w2, self.b2]

    def _project(self, name, x, rng, use_adapters):
        bsz, L, d = x.shape
        flat = x.reshape(-1, d)
        layer = self.proj[name]
        if not use_adapters:
            return (flat @ layer.w0.value.T).reshape(bsz, L, -1), None
        h, rec = layer.forward(flat, rng)
        return h.reshape(bsz, L, -1), rec

    def forward(self, x, rng=None, use_adapters=True):
        records = {}
        a, ln1 = layer_norm(x)
        q, records["q"] = self._project("q", a, rng, use_adapters)
        k, records["k"] = self._project("k", a, rng, use_adapters)
        v, records["v"] = self._project("v", a, rng, use_adapters)
        att = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(self.d))
        c = att @ v
        o, records["o"] = self._project("o", c, rng, use_adapters)
        x1 = x + o
        b, ln2 = layer_norm(x1)
        t = np.tanh(b @ self.w1.value.T + self.b1.value)
        y = x1 + t @ self.w2.value.T + self.b2.value
        self._cache = (ln1, ln2, q, k, v, att, t) if use_adapters else None
        return y, records, att

    def backward(self, gy, aux_coeff=0.0):
        if self._cache is None:
            raise StateError("attention block backward called before an adapted forward")
        ln1, ln2, q, k, v, att, t = self._cache
        bsz, L, d = gy.shape
        gz = (gy @ self.w2.value) * (1.0 - t * t)
        gx1 = gy + layer_norm_backward(ln2, gz @ self.w1.value)
        gc = self.proj["o"].backward(gx1.reshape(-1, d), aux_coeff).reshape(bsz, L, d)
        gatt = gc @ v.transpose(0, 2, 1)
        gv = att.transpose(0, 2, 1) @ gc
        gs = softmax_backward(att, gatt) / np.sqrt(d)
        gq = gs @ k
        gk = gs.transpose(0, 2, 1) @ q
        ga = (self.proj["q"].backward(gq.reshape(-1, d), aux_coeff)
              + self.proj["k"].backward(gk.reshape(-1, d), aux_coeff)
              + self.proj["v"].backward(gv.reshape(-1, d), aux_coeff))
        return gx1 + layer_norm_backward(ln1, ga.reshape(bsz, L, d))


class _AdaptedModel:
    """Shared bookkeeping for models built from adapted layers."""

    projections: tuple = PROJECTIONS
    n_router_layers: int = 0
    n_experts: int = 1

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def adapted_layers(self) -> list[tuple[tuple[int, str], AdaMoleLinear]]:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def balance_losses(self) -> list[float]:
        return [layer.balance_loss() for _, layer in self.adapted_layers()]

    def base_hash(self) -> str:
        """Digest of every frozen weight; unchanged by any amount of training."""
        h = hashlib.sha256()
        for p in sorted(self.frozen_parameters(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def census(self) -> dict[str, int]:
        out = {"adapter": 0, "router": 0, "head": 0, "frozen": 0}
        adapter_ids = {id(p) for _, layer in self.adapted_layers() for p in layer.adapter_parameters()}
        router_ids = set()
        for _, layer in self.adapted_layers():
            for net in (layer.gate, layer.threshold):
                if net is not None:
                    router_ids.update(id(p) for p in net.parameters())
        for p in self.parameters():
            if not p.trainable:
                out["frozen"] += p.size
            elif id(p) in adapter_ids:
                out["adapter"] += p.size
            elif id(p) in router_ids:
                out["router"] += p.size
            else:
                out["head"] += p.size
        out["trainable"] = out["adapter"] + out["router"] + out["head"]
        return out


class ToyModel(_AdaptedModel):
    def __init__(self, cfg: ToyModelConfig):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.n_experts = cfg.n_experts
        self.n_router_layers = cfg.n_layers
        self.embedding = Parameter("embedding", gaussian_init(cfg.vocab_size, d, 1.0, cfg.seed, "embedding"),
                                   trainable=False)
        self.positions = Parameter("positions", gaussian_init(cfg.seq_len, d, 1.0, cfg.seed, "positions"),
                                   trainable=False)
        self.blocks = [AttentionBlock(cfg, i) for i in range(cfg.n_layers)]
        self.w_head = Parameter("head.w", gaussian_init(cfg.n_classes, d, d ** -0.5, cfg.seed, "head.w"),
                                decay=True)
        self.b_head = Parameter("head.b", np.zeros(cfg.n_classes), decay=True)
        self._cache = None

    def parameters(self):
        ps = [self.embedding, self.positions]
        for blk in self.blocks:
            ps.extend(blk.parameters())
        return ps + [self.w_head, self.b_head]

    def adapted_layers(self):
        return [((i, name), blk.proj[name]) for i, blk in enumerate(self.blocks) for name in PROJECTIONS]

    def forward(self, tokens, rng=None, use_adapters=True):
        """Returns ``(logits, records)`` with records keyed by ``(layer, projection)``."""
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        tb = tokens[None, :] if single else tokens
        if tb.ndim != 2 or tb.shape[1] < 1 or tb.shape[1] > self.cfg.seq_len:
            raise ShapeError(f"token batch must be (B, L) with 1 <= L <= {self.cfg.seq_len}, got {tokens.shape}")
        if not np.issubdtype(tb.dtype, np.integer) or tb.min() < 0 or tb.max() >= self.cfg.vocab_size:
            raise ConfigError(f"token ids must be integers in [0, {self.cfg.vocab_size})")
        L = tb.shape[1]
        x = self.embedding.value[tb] + self.positions.value[:L]
        records = {}
        self.attention = []
        for i, blk in enumerate(self.blocks):
            x, recs, att = blk.forward(x, rng, use_adapters)
            self.attention.append(att)
            for name, rec in recs.items():
                records[(i, name)] = rec
        xf, lnf = layer_norm(x)
        pooled = xf.mean(axis=1)
        logits = pooled @ self.w_head.value.T + self.b_head.value
        self._cache = (lnf, pooled, L) if use_adapters else None
        return (logits[0] if single else logits), (records if use_adapters else {})

    def backward(self, dlogits, aux_coeff: float = 0.0) -> None:
        if self._cache is None:
            raise StateError("model backward called before forward")
        lnf, pooled, L = self._cache
        g = np.asarray(dlogits, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        self.w_head.accumulate(g.T @ pooled)
        self.b_head.accumulate(g.sum(axis=0))
        gp = g @ self.w_head.value
        gx = layer_norm_backward(lnf, np.repeat(gp[:, None, :] / L, L, axis=1))
        for blk in reversed(self.blocks):
            gx = blk.backward(gx, aux_coeff)


class RoutedClassifier(_AdaptedModel):
    """One adapted ``hidden x in_dim`` layer followed by a frozen random readout.

    Nothing outside the adapted layer is trainable, so a run whose routers
    never activate an expert stays at the frozen model's accuracy.
    """

    projections = ("fc",)
    n_router_layers = 1

    def __init__(self, in_dim: int, hidden: int, n_classes: int, n_experts: int, rank: int,
                 alpha: float, mode: MixMode, seed: int = 0, dropout: float = 0.0):
        if in_dim < 1 or hidden < 1 or n_classes < 2:
            raise ConfigError("in_dim, hidden >= 1 and n_classes >= 2 required")
        self.in_dim, self.hidden, self.n_classes = in_dim, hidden, n_classes
        self.n_experts = n_experts
        self.mode = mode
        self.spec = dict(in_dim=in_dim, hidden=hidden, n_classes=n_classes, n_experts=n_experts,
                         rank=rank, alpha=alpha, mode=mode.to_dict(), seed=seed, dropout=dropout)
        self.fc = AdaMoleLinear(hidden, in_dim, n_experts, rank, alpha, mode, seed=seed,
                                dropout_rate=dropout, name="fc")
        self.readout = Parameter("readout", gaussian_init(n_classes, hidden, hidden ** -0.5, seed, "readout"),
                                 trainable=False)
        self._cache = None

    def parameters(self):
        return self.fc.parameters() + [self.readout]

    def adapted_layers(self):
        return [((0, "fc"), self.fc)]

    def forward(self, x, rng=None, use_adapters=True):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if use_adapters:
            h, rec = self.fc.forward(xb, rng)
            records = {(0, "fc"): rec}
        else:
            h, records = xb @ self.fc.w0.value.T, {}
        logits = h @ self.readout.value.T
        self._cache = True if use_adapters else None
        return (logits[0] if single else logits), records

    def backward(self, dlogits, aux_coeff: float = 0.0) -> None:
        if self._cache is None:
            raise StateError("model backward called before forward")
        g = np.asarray(dlogits, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        self.fc.backward(g @ self.readout.value, aux_coeff)


def build_model(cfg: ToyModelConfig) -> ToyModel:
    return ToyModel(cfg)


def build_router_model(cfg: ToyModelConfig, in_dim: int) -> RoutedClassifier:
    """Routed classifier sized from a model config: ``d_model`` is the hidden width."""
    cfg.validate()
    return RoutedClassifier(in_dim, cfg.d_model, cfg.n_classes, cfg.n_experts, cfg.lora_rank,
                            cfg.lora_alpha, cfg.mode, seed=cfg.seed, dropout=cfg.dropout)


def model_forward(m, inputs, rng=None):
    return m.forward(inputs, rng)


def model_backward(m, dlogits, aux_coeff: float = 0.0):
    m.backward(dlogits, aux_coeff)


def records_active_counts(records: dict[tuple[int, str], ActivationRecord]):
    """Per-cell arrays of active-expert counts (one entry per token)."""
    return {key: np.atleast_1d(rec.weights.active_count) for key, rec in records.items()}
