"""JSON experiment configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ToyModelConfig, build_model, build_router_model
from .moe_layer import MixMode
from .training import TrainConfig, make_cluster_routing, make_token_rule

TASK_KINDS = ("cluster_routing", "token_rule")


@dataclass
class TaskConfig:
    kind: str = "cluster_routing"
    n_samples: int = 2000
    val_fraction: float = 0.25
    # cluster_routing
    n_clusters: int = 4
    dim: int = 16
    noise_std: float = 1.0
    separation: float = 8.0
    # token_rule
    n_rules: int = 4

    def validate(self) -> "TaskConfig":
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("task.val_fraction must lie in (0, 1)")
        return self


@dataclass
class ExperimentConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    mode: MixMode = field(default_factory=lambda: MixMode.adaptive(1 / 8))
    seed: int = 0
    out: str = "runs/default"

    def resolved_model(self) -> ToyModelConfig:
        return replace(self.model, mode=self.mode, seed=self.seed).validate()

    def resolved_train(self) -> TrainConfig:
        return replace(self.train, seed=self.seed).validate()

    def validate(self) -> "ExperimentConfig":
        self.task.validate()
        self.resolved_model()
        self.resolved_train()
        return self

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model.pop("mode")
        model.pop("seed")
        train = asdict(self.train)
        train.pop("seed")
        return {"model": model, "train": train, "task": asdict(self.task),
                "mode": self.mode.to_dict(), "seed": self.seed, "out": self.out}


def _section(cls, data, name, reserved=()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(reserved)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - {"model", "train", "task", "mode", "seed", "out"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        model=_section(ToyModelConfig, data.get("model", {}), "model", reserved=("mode", "seed")),
        train=_section(TrainConfig, data.get("train", {}), "train", reserved=("seed",)),
        task=_section(TaskConfig, data.get("task", {}), "task"),
        mode=MixMode.from_dict(data.get("mode", {"kind": "adamole", "tau_max": 1 / 8})),
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "runs/default")),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, seed=None, mode=None, tau_max=None, tau=None, top_k=None,
                    experts=None, rank=None, out=None) -> ExperimentConfig:
    """Command-line overrides. Switching to ``lora`` folds ``N * r`` into one expert."""
    model = cfg.model
    if experts is not None:
        model = replace(model, n_experts=experts)
    if rank is not None:
        model = replace(model, lora_rank=rank)
    new_mode = cfg.mode
    n = model.n_experts
    if mode is not None:
        if mode == "lora":
            new_mode = MixMode.single_lora()
            model = replace(model, n_experts=1, lora_rank=model.n_experts * model.lora_rank)
        elif mode == "topk":
            new_mode = MixMode.top_k(top_k if top_k is not None else min(2, n))
        elif mode == "fixed":
            new_mode = MixMode.fixed(tau if tau is not None else 1.0 / n)
        elif mode == "adamole":
            new_mode = MixMode.adaptive(tau_max if tau_max is not None else 1.0 / n)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    elif tau_max is not None:
        if cfg.mode.kind != "adamole":
            raise ConfigError("--tau-max only applies to adamole mode")
        new_mode = MixMode.adaptive(tau_max)
    out_cfg = replace(cfg, model=model, mode=new_mode,
                      seed=cfg.seed if seed is None else seed,
                      out=cfg.out if out is None else out)
    return out_cfg.validate()


def build_experiment(cfg: ExperimentConfig):
    """Returns ``(model, task)`` for a validated config."""
    mcfg = cfg.resolved_model()
    t = cfg.task
    if t.kind == "cluster_routing":
        task = make_cluster_routing(t.n_clusters, t.dim, t.n_samples, cfg.seed, n_classes=mcfg.n_classes,
                                    noise_std=t.noise_std, separation=t.separation,
                                    val_fraction=t.val_fraction)
        return build_router_model(mcfg, t.dim), task
    task = make_token_rule(t.n_rules, mcfg, cfg.seed, n_samples=t.n_samples, val_fraction=t.val_fraction)
    return build_model(mcfg), task
