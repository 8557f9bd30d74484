"""Deterministic simulator and router for prefill-only MoE serving."""

from .comm import Strategy, StrategyKind
from .config import (
    CLUSTER_PRESETS,
    H100_FP8,
    MODEL_PRESETS,
    QWEN3_30B,
    QWEN3_235B,
    ClusterConfig,
    EfficiencyCurve,
    LinkModel,
    ModelConfig,
)

__all__ = [
    "CLUSTER_PRESETS",
    "ClusterConfig",
    "EfficiencyCurve",
    "H100_FP8",
    "LinkModel",
    "MODEL_PRESETS",
    "ModelConfig",
    "QWEN3_235B",
    "QWEN3_30B",
    "Strategy",
    "StrategyKind",
]

__version__ = "0.1.0"
