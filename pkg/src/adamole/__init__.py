"""Adaptive mixtures of LoRA experts with learned activation thresholds."""

from .errors import AdamoleError, ConfigError, NumericError, ShapeError, StateError
from .gating import (
    GateNetwork,
    MixWeights,
    ThresholdNetwork,
    adaptive_weights,
    compute_threshold,
    gate_probs,
    load_balance_loss,
    threshold_weights,
    topk_weights,
)
from .lora import LoraExpert, expert_backward, expert_forward, init_expert
from .model import RoutedClassifier, ToyModel, ToyModelConfig, build_model, build_router_model
from .moe_layer import ActivationRecord, AdaMoleLinear, MixMode, count_active
from .telemetry import ActivationStats
from .training import TrainConfig, make_cluster_routing, make_token_rule, train

__version__ = "0.1.0"
