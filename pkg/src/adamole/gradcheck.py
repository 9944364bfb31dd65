"""Finite-difference checks of every backward pass.

Each group builds a small component with randomized trainable parameters,
draws inputs uniformly from ``[-2, 2]``, rejects probes whose routing sits
within ``MARGIN`` of a selection boundary, and compares analytic gradients
against :func:`adamole.oracle.finite_diff`.
"""

from __future__ import annotations

import numpy as np

from .gating import GateNetwork, ThresholdNetwork
from .lora import LoraExpert
from .model import AttentionBlock, RoutedClassifier, ToyModel, ToyModelConfig
from .moe_layer import AdaMoleLinear, MixMode
from .numeric import rng_for
from .oracle import GradReport, finite_diff, group_floor
from .training import cross_entropy

MARGIN = 1e-3
AUX = 0.5  # exaggerated so the balance term is visible in the check
MAX_TRIES = 200


def randomize(params, rng, lo=-1.0, hi=1.0):
    for p in params:
        if p.trainable:
            p.value[...] = rng.uniform(lo, hi, size=p.value.shape)


def routing_margin(layer: AdaMoleLinear) -> float:
    """Distance of the cached routing decision from its nearest selection boundary."""
    _, p, tau, mw, _, _ = layer._cache
    kind = layer.mode.kind
    if kind == "lora":
        return np.inf
    if kind == "topk":
        k = layer.mode.k
        if k == p.shape[1]:
            return np.inf
        srt = -np.sort(-p, axis=1)
        return float(np.min(srt[:, k - 1] - srt[:, k]))
    t = layer.mode.tau if kind == "fixed" else tau[:, None]
    margin = float(np.min(np.abs(p - t)))
    if kind == "adamole":
        margin = min(margin, float(np.min(np.where(mw.active_count > 0, mw.denom, np.inf))))
    return margin


def _compare(report, name, analytic, objective, arrays):
    numeric = finite_diff(objective, arrays)
    floor = group_floor(list(analytic) + list(numeric))
    for label, a, n in zip(name, analytic, numeric):
        report.add(label, a, n, floor)


def check_expert(rng) -> GradReport:
    e = LoraExpert(6, 4, 2, alpha=3.0, seed=int(rng.integers(1 << 30)))
    randomize(e.parameters(), rng)
    x = rng.uniform(-2, 2, size=(3, 4))
    c = rng.normal(size=(3, 6))
    e.forward(x)
    gx = e.backward(c)
    rep = GradReport()
    _compare(rep, ["expert.a", "expert.b", "expert.x"], [e.a.grad, e.b.grad, gx],
             lambda: float(np.sum(c * e.forward(x))), [e.a.value, e.b.value, x])
    return rep


def check_gate(rng) -> GradReport:
    g = GateNetwork(4, 5, seed=int(rng.integers(1 << 30)))
    randomize(g.parameters(), rng)
    x = rng.uniform(-2, 2, size=(3, 5))
    c = rng.normal(size=(3, 4))
    g.forward(x)
    gx = g.backward(c)
    rep = GradReport()
    _compare(rep, ["gate.w_g", "gate.x"], [g.w_g.grad, gx],
             lambda: float(np.sum(c * g.forward(x))), [g.w_g.value, x])
    return rep


def check_threshold(rng) -> GradReport:
    t = ThresholdNetwork(5, tau_max=float(rng.uniform(0.1, 1.0)))
    randomize(t.parameters(), rng)
    x = rng.uniform(-2, 2, size=(3, 5))
    c = rng.normal(size=3)
    t.forward(x)
    gx = t.backward(c)
    rep = GradReport()
    _compare(rep, ["threshold.w_tau", "threshold.b_tau", "threshold.x"], [t.w_tau.grad, t.b_tau.grad, gx],
             lambda: float(np.sum(c * t.forward(x))), [t.w_tau.value, t.b_tau.value, x])
    return rep


def check_layer(rng, mode: MixMode, n_experts: int = 3) -> GradReport:
    """Random 6x4 layer, rank 1, objective ``sum(c * h) + AUX * balance``."""
    if mode.kind == "lora":
        n_experts = 1
    for _ in range(MAX_TRIES):
        layer = AdaMoleLinear(6, 4, n_experts, 1, alpha=2.0, mode=mode, seed=int(rng.integers(1 << 30)))
        randomize(layer.parameters(), rng)
        if layer.threshold is not None:
            layer.threshold.b_tau.value[...] = rng.uniform(-1.0, 1.0)
        x = rng.uniform(-2, 2, size=(5, 4))
        layer.forward(x)
        if routing_margin(layer) > MARGIN:
            break
    else:
        raise RuntimeError(f"no probe with routing margin > {MARGIN} for {mode}")
    c = rng.normal(size=(5, 6))

    def objective():
        h, _ = layer.forward(x)
        return float(np.sum(c * h)) + AUX * layer.balance_loss()

    objective()
    gx = layer.backward(c, AUX)
    trainable = [p for p in layer.parameters() if p.trainable]
    rep = GradReport()
    names = [f"layer[{mode.kind}].{p.name.split('.', 1)[1]}" for p in trainable] + [f"layer[{mode.kind}].x"]
    _compare(rep, names, [p.grad for p in trainable] + [gx], objective, [p.value for p in trainable] + [x])
    rep.add(f"layer[{mode.kind}].w0_frozen", layer.w0.grad, np.zeros_like(layer.w0.grad))
    return rep


def _small_cfg(rng, mode=None) -> ToyModelConfig:
    return ToyModelConfig(n_layers=2, d_model=4, vocab_size=10, seq_len=4, n_classes=3, n_experts=3,
                          lora_rank=1, lora_alpha=2.0, mode=mode or MixMode.adaptive(1 / 3),
                          seed=int(rng.integers(1 << 30)))


def _margin_ok(model) -> bool:
    return all(routing_margin(layer) > MARGIN for _, layer in model.adapted_layers())


def check_attention_block(rng) -> GradReport:
    cfg = _small_cfg(rng)
    for _ in range(MAX_TRIES):
        blk = AttentionBlock(cfg, 0)
        randomize(blk.parameters(), rng, -0.5, 0.5)
        x = rng.uniform(-2, 2, size=(2, 3, cfg.d_model))
        blk.forward(x)
        if all(routing_margin(layer) > MARGIN for layer in blk.proj.values()):
            break
    else:
        raise RuntimeError("no attention probe with sufficient routing margin")
    c = rng.normal(size=x.shape)

    def objective():
        y, _, _ = blk.forward(x)
        return float(np.sum(c * y)) + AUX * sum(l.balance_loss() for l in blk.proj.values())

    objective()
    gx = blk.backward(c, AUX)
    trainable = [p for p in blk.parameters() if p.trainable]
    rep = GradReport()
    analytic = [p.grad for p in trainable] + [gx]
    names = [f"attention.{p.name.split('.', 2)[2]}" for p in trainable] + ["attention.x"]
    _compare(rep, names, analytic, objective, [p.value for p in trainable] + [x])
    return rep


def _model_objective(model, inputs, labels):
    def objective():
        logits, _ = model.forward(inputs)
        ce, _ = cross_entropy(logits, labels)
        return ce + AUX * sum(model.balance_losses())
    return objective


def _check_model(model, inputs, labels, prefix) -> GradReport:
    objective = _model_objective(model, inputs, labels)
    model.zero_grad()
    logits, _ = model.forward(inputs)
    _, dlogits = cross_entropy(logits, labels)
    model.backward(dlogits, AUX)
    trainable = model.trainable_parameters()
    rep = GradReport()
    _compare(rep, [f"{prefix}.{p.name}" for p in trainable], [p.grad.copy() for p in trainable],
             objective, [p.value for p in trainable])
    frozen = model.frozen_parameters()
    rep.add(f"{prefix}.frozen", np.concatenate([p.grad.ravel() for p in frozen]),
            np.zeros(sum(p.size for p in frozen)))
    return rep


def check_model(rng) -> GradReport:
    cfg = _small_cfg(rng)
    for _ in range(MAX_TRIES):
        model = ToyModel(cfg)
        randomize(model.trainable_parameters(), rng, -0.5, 0.5)
        tokens = rng.integers(0, cfg.vocab_size, size=(2, cfg.seq_len))
        model.forward(tokens)
        if _margin_ok(model):
            break
    else:
        raise RuntimeError("no model probe with sufficient routing margin")
    labels = rng.integers(0, cfg.n_classes, size=2)
    return _check_model(model, tokens, labels, "model")


def check_router_model(rng) -> GradReport:
    for _ in range(MAX_TRIES):
        model = RoutedClassifier(5, 6, 3, 4, 1, 2.0, MixMode.adaptive(0.25), seed=int(rng.integers(1 << 30)))
        randomize(model.trainable_parameters(), rng)
        x = rng.uniform(-2, 2, size=(4, 5))
        model.forward(x)
        if _margin_ok(model):
            break
    else:
        raise RuntimeError("no router probe with sufficient routing margin")
    labels = rng.integers(0, 3, size=4)
    return _check_model(model, x, labels, "router_model")


def run_gradcheck(seed: int = 0, n_seeds: int = 1) -> dict[str, GradReport]:
    """Runs every check group ``n_seeds`` times; returns one report per group."""
    groups = {
        "lora_expert": check_expert,
        "gate": check_gate,
        "threshold": check_threshold,
        "layer[lora]": lambda r: check_layer(r, MixMode.single_lora()),
        "layer[topk]": lambda r: check_layer(r, MixMode.top_k(2)),
        "layer[fixed]": lambda r: check_layer(r, MixMode.fixed(1 / 3)),
        "layer[adamole]": lambda r: check_layer(r, MixMode.adaptive(1 / 3)),
        "attention_block": check_attention_block,
        "model_loss": check_model,
        "router_model_loss": check_router_model,
    }
    out = {}
    for name, fn in groups.items():
        rep = GradReport()
        for s in range(n_seeds):
            rep.merge(fn(rng_for(seed + s, f"gradcheck.{name}")))
        out[name] = rep
    return out
