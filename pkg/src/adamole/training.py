"""Optimizer, schedule, losses, synthetic tasks and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import Parameter, rng_for, softmax
from .telemetry import ActivationStats


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    warmup_steps: int = 200
    aux_coeff: float = 1e-3
    epochs: int = 3
    seed: int = 0
    max_steps: int = 0  # > 0 overrides epochs
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_adapters: bool = False

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.aux_coeff < 0 or self.weight_decay < 0:
            raise ConfigError("lr, aux_coeff and weight_decay must be non-negative")
        if self.batch_size < 1 or self.warmup_steps < 0 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("batch_size, epochs >= 1 and warmup_steps, max_steps >= 0 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("betas must lie in [0, 1) and eps must be positive")
        return self


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``warmup_steps``, constant afterwards."""
    if step < 1:
        raise ConfigError(f"steps are 1-based, got {step}")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_adapters: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamWState":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.decay_adapters)


def adamw_step(params: list[Parameter], state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update; gradients are zeroed afterwards.

    Decay applies to parameters flagged ``decay`` (gate, threshold, head), and
    to the LoRA matrices only if ``state.decay_adapters`` is set.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        if m.shape != p.value.shape:
            raise ShapeError(f"optimizer state for {p.name} has shape {m.shape}, parameter {p.value.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and (p.decay or state.decay_adapters):
            p.value *= 1.0 - lr * state.weight_decay
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


# -- losses ------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` (``(B, C)``)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim == 1:
        logits, labels = logits[None, :], labels.reshape(1)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(b), labels]))
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def total_loss(logits, label, balance_losses, aux_coeff: float) -> float:
    ce, _ = cross_entropy(logits, label)
    return ce + aux_coeff * float(sum(balance_losses))


# -- synthetic tasks ---------------------------------------------------------

@dataclass
class SyntheticTask:
    kind: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    group_train: np.ndarray  # cluster id or rule id per example
    group_val: np.ndarray
    n_classes: int
    n_groups: int
    meta: dict = field(default_factory=dict)

    @property
    def chance(self) -> float:
        return 1.0 / self.n_classes


def _orthonormal(rng, n_vectors: int, dim: int, exclude=None) -> np.ndarray:
    """``n_vectors`` orthonormal rows, orthogonal to the rows of ``exclude`` when given."""
    g = rng.normal(size=(dim, n_vectors))
    if exclude is not None and len(exclude):
        qe, _ = np.linalg.qr(np.asarray(exclude).T)
        g = g - qe @ (qe.T @ g)
    q, _ = np.linalg.qr(g)
    return q[:, :n_vectors].T


def _split(rng, n: int, val_fraction: float):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def make_cluster_routing(n_clusters: int, dim: int, n_samples: int, seed: int, n_classes: int = 4,
                         noise_std: float = 1.0, separation: float = 8.0,
                         val_fraction: float = 0.25) -> SyntheticTask:
    """Gaussian clusters, each with its own linear labelling rule.

    Centers are ``separation * noise_std`` apart. Within cluster ``c`` the
    label is ``argmax(U_c @ (x - mu_c))`` for a cluster-specific orthonormal
    frame ``U_c``; the frames avoid the span of the centers when the dimension
    allows. Points whose nearest center is not their own are redrawn.
    """
    if n_clusters < 2:
        raise ConfigError("need at least two clusters")
    if n_classes < 2 or n_classes > dim:
        raise ConfigError(f"n_classes must lie in [2, dim={dim}]")
    if separation < 6.0 or noise_std <= 0:
        raise ConfigError("clusters must be at least 6 noise std apart")
    if n_samples < 2 * n_clusters:
        raise ConfigError("too few samples for the number of clusters")
    rng = rng_for(seed, "task.clusters")
    dist = separation * noise_std
    if n_clusters <= dim:
        centers = _orthonormal(rng, n_clusters, dim) * dist / math.sqrt(2.0)
    else:
        centers = rng.normal(size=(n_clusters, dim))
        while True:
            centers = rng.normal(size=(n_clusters, dim)) * dist
            gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
            if gaps[np.triu_indices(n_clusters, 1)].min() >= dist:
                break
    avoid = centers if n_clusters + n_classes <= dim else None
    frames = np.stack([_orthonormal(rng, n_classes, dim, avoid) for _ in range(n_clusters)])

    groups = rng.permutation(np.arange(n_samples) % n_clusters)
    noise = rng.normal(0.0, noise_std, size=(n_samples, dim))
    x = centers[groups] + noise
    while True:
        nearest = np.argmin(np.linalg.norm(x[:, None, :] - centers[None], axis=-1), axis=1)
        bad = np.flatnonzero(nearest != groups)
        if bad.size == 0:
            break
        noise[bad] = rng.normal(0.0, noise_std, size=(bad.size, dim))
        x[bad] = centers[groups[bad]] + noise[bad]
    y = np.argmax(np.einsum("ncd,nd->nc", frames[groups], noise), axis=1)

    tr, va = _split(rng, n_samples, val_fraction)
    return SyntheticTask("cluster_routing", x[tr], y[tr], x[va], y[va], groups[tr], groups[va],
                         n_classes, n_clusters,
                         meta={"centers": centers, "frames": frames, "noise_std": noise_std, "dim": dim})


def make_token_rule(n_rules: int, cfg, seed: int, n_samples: int = 2000,
                    val_fraction: float = 0.25) -> SyntheticTask:
    """Sequences ``[rule_id, body...]`` labelled by a rule-specific token grouping.

    Each rule partitions the body vocabulary into ``cfg.n_classes`` groups; the
    label is the group contributing the most body tokens (lowest group on ties).
    """
    n_body = cfg.vocab_size - n_rules
    if n_rules < 1 or n_body < cfg.n_classes:
        raise ConfigError("vocabulary too small for the requested rules and classes")
    if cfg.seq_len < 2:
        raise ConfigError("token-rule sequences need seq_len >= 2")
    rng = rng_for(seed, "task.token_rule")
    assign = np.stack([rng.permutation(np.arange(n_body) % cfg.n_classes) for _ in range(n_rules)])
    rules = rng.integers(0, n_rules, size=n_samples)
    body = rng.integers(0, n_body, size=(n_samples, cfg.seq_len - 1))
    groups = assign[rules[:, None], body]
    counts = np.stack([(groups == c).sum(axis=1) for c in range(cfg.n_classes)], axis=1)
    y = np.argmax(counts, axis=1)
    tokens = np.concatenate([rules[:, None], body + n_rules], axis=1).astype(np.int64)
    tr, va = _split(rng, n_samples, val_fraction)
    return SyntheticTask("token_rule", tokens[tr], y[tr], tokens[va], y[va], rules[tr], rules[va],
                         cfg.n_classes, n_rules, meta={"assignments": assign})


# -- loop --------------------------------------------------------------------

@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    final_val_acc: float = 0.0
    train_loss_start: float = 0.0
    train_loss_end: float = 0.0
    steps: int = 0
    stats: ActivationStats | None = None
    base_hash: str = ""

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "aux_loss", "val_acc"])
        for r in self.rows:
            w.writerow([r["step"], repr(r["loss"]), repr(r["lr"]), repr(r["aux_loss"]),
                        "" if r["val_acc"] is None else repr(r["val_acc"])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "final_val_acc": self.final_val_acc,
            "train_loss_start": self.train_loss_start,
            "train_loss_end": self.train_loss_end,
            "val_history": [list(v) for v in self.val_history],
            "avg_active_experts": None if self.stats is None else self.stats.overall_average(),
            "activation_stats": None if self.stats is None else self.stats.to_dict(),
            "base_hash": self.base_hash,
        }


def evaluate(model, x, y, batch_size: int = 256, stats: ActivationStats | None = None):
    """Accuracy and mean cross-entropy; routing counts go into ``stats`` when given."""
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits, records = model.forward(xb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        loss_sum += cross_entropy(logits, yb)[0] * len(xb)
        if stats is not None:
            stats.record_all(records)
    return correct / len(x), loss_sum / len(x)


def train(model, task: SyntheticTask, cfg: TrainConfig, log=None) -> TrainReport:
    """Minibatch AdamW on ``task``; deterministic for a given ``cfg.seed``."""
    cfg.validate()
    n = len(task.x_train)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps or cfg.epochs * per_epoch
    shuffle_rng = rng_for(cfg.seed, "train.shuffle")
    dropout_rng = rng_for(cfg.seed, "train.dropout")
    state = AdamWState.from_config(cfg)
    params = model.parameters()
    report = TrainReport(steps=total)
    report.train_loss_start = evaluate(model, task.x_train, task.y_train)[1]

    order = shuffle_rng.permutation(n)
    cursor = 0
    for step in range(1, total + 1):
        if cursor + cfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        model.zero_grad()
        logits, _ = model.forward(task.x_train[idx], dropout_rng)
        ce, dlogits = cross_entropy(logits, task.y_train[idx])
        aux = float(sum(model.balance_losses()))
        model.backward(dlogits, cfg.aux_coeff)
        lr = lr_at(step, cfg)
        adamw_step(params, state, lr)
        row = {"step": step, "loss": ce + cfg.aux_coeff * aux, "lr": lr, "aux_loss": aux, "val_acc": None}
        if step % per_epoch == 0 or step == total:
            acc, _ = evaluate(model, task.x_val, task.y_val)
            row["val_acc"] = acc
            report.val_history.append((step, acc))
            if log is not None:
                log(f"step {step}/{total} loss {row['loss']:.4f} val_acc {acc:.4f}")
        report.rows.append(row)

    report.train_loss_end = evaluate(model, task.x_train, task.y_train)[1]
    report.stats = ActivationStats.for_model(model)
    report.final_val_acc, _ = evaluate(model, task.x_val, task.y_val, stats=report.stats)
    report.base_hash = model.base_hash()
    return report
