"""Per-device, per-layer communication volumes and link timing.

Collective sizes assume ring-style implementations and ignore routing
imbalance; the ``(P-1)/P`` factor is evaluated exactly and floored to whole
bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .config import ModelConfig
from .costmodel import weight_bytes


class StrategyKind(str, enum.Enum):
    """Attention-parallelism x expert-parallelism combinations."""

    DP_DP = "dp_dp"
    DP_TP = "dp_tp"
    DP_EP = "dp_ep"
    TP_TP = "tp_tp"
    TP_EP = "tp_ep"
    PP_PP = "pp_pp"
    SP_TP = "sp_tp"
    SP_EP = "sp_ep"
    DP_ASYNCEP = "dp_asyncep"

    @property
    def attention(self) -> str:
        return self.value.split("_")[0]

    @property
    def experts(self) -> str:
        return self.value.split("_")[1]

    @property
    def synchronous(self) -> bool:
        return self is not StrategyKind.DP_ASYNCEP


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    offload: bool = False
    window: int = 2

    def __post_init__(self) -> None:
        if not isinstance(self.kind, StrategyKind):
            object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is not StrategyKind.DP_ASYNCEP and self.offload:
            raise ValueError(f"offloading is only defined for dp_asyncep, not {self.kind.value}")
        if self.offload and self.window < 1:
            raise ValueError(f"prefetch window must be >= 1 with offload, got {self.window}")

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def parse(cls, text: str, **kwargs) -> "Strategy":
        return cls(StrategyKind(text.strip().lower()), **kwargs)


def _ring(numerator: int, P: int) -> int:
    # exact numerator * (P - 1) / P, floored
    return numerator * (P - 1) // P


def per_layer_comm_bytes(strategy: Strategy | StrategyKind, P: int, B: int, S: int,
                         cfg: ModelConfig) -> int:
    """On-path bytes each device exchanges per layer under ``strategy``."""
    if P < 1:
        raise ValueError(f"parallel degree must be >= 1, got {P}")
    kind = strategy.kind if isinstance(strategy, Strategy) else StrategyKind(strategy)
    tokens = B * S
    act = tokens * cfg.H * cfg.b
    K = StrategyKind
    if kind in (K.DP_DP, K.DP_ASYNCEP):
        return 0
    if kind in (K.DP_TP, K.TP_TP):
        return _ring(4 * act, P)
    if kind is K.DP_EP:
        return _ring(4 * cfg.k * act, P)
    if kind is K.TP_EP:
        return _ring((2 + 4 * cfg.k) * act, P)
    if kind is K.PP_PP:
        return 2 * act
    if kind is K.SP_TP:
        return _ring((2 * cfg.N_kv * cfg.d_h + 4 * cfg.H) * tokens * cfg.b, P)
    if kind is K.SP_EP:
        return _ring((2 * cfg.N_kv * cfg.d_h + 4 * cfg.k * cfg.H) * tokens * cfg.b, P)
    raise ValueError(f"unknown strategy {kind!r}")


def asyncep_gather_bytes(P: int, cfg: ModelConfig) -> int:
    """Expert bytes a device receives to assemble one full MoE layer."""
    if P < 1:
        raise ValueError(f"parallel degree must be >= 1, got {P}")
    return _ring(weight_bytes(cfg).expert_per_layer, P)


def offload_h2d_bytes(P: int, cfg: ModelConfig, device: int = 0) -> int:
    """Expert shard bytes ``device`` streams from host memory per layer.

    Shards differ by at most one byte so that they sum to the full layer;
    device 0 always carries the largest shard.
    """
    if P < 1:
        raise ValueError(f"parallel degree must be >= 1, got {P}")
    if not 0 <= device < P:
        raise ValueError(f"device index {device} outside [0, {P})")
    q, r = divmod(weight_bytes(cfg).expert_per_layer, P)
    return q + (1 if device < r else 0)


def transfer_time(nbytes: float, link_bw: float, latency_floor: float = 0.0) -> float:
    if nbytes < 0:
        raise ValueError(f"byte count must be >= 0, got {nbytes}")
    return latency_floor + nbytes / link_bw
