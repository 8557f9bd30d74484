"""Analytical FLOPs and HBM footprint formulas.

Byte counts are exact integers; FLOPs are floats. Every function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import EfficiencyCurve, ModelConfig


@dataclass(frozen=True)
class WeightBytes:
    attn_total: int
    expert_total: int
    expert_per_layer: int
    expert_per_expert: int

    @property
    def total(self) -> int:
        return self.attn_total + self.expert_total


@dataclass(frozen=True)
class CostBreakdown:
    prefix_flops: float = 0.0
    ffn_flops: float = 0.0
    self_attn_flops: float = 0.0
    cross_attn_flops: float = 0.0

    @property
    def total_flops(self) -> float:
        return self.prefix_flops + self.ffn_flops + self.self_attn_flops + self.cross_attn_flops


def kv_bytes(B: int, S: int, cfg: ModelConfig) -> int:
    """KV cache footprint: 2 * L * B * S * N_kv * d_h * b."""
    return 2 * cfg.L * B * S * cfg.N_kv * cfg.d_h * cfg.b


def activation_bytes(B: int, S: int, cfg: ModelConfig) -> int:
    """Peak activation footprint, taken as the two largest MLP intermediates
    amplified by the top-k fan-out: 2 * B * S * k * h * b."""
    return 2 * B * S * cfg.k * cfg.h * cfg.b


def weight_bytes(cfg: ModelConfig) -> WeightBytes:
    per_expert = 3 * cfg.H * cfg.h * cfg.b  # gate, up, down projections
    per_layer = cfg.E * per_expert
    return WeightBytes(
        attn_total=cfg.L * cfg.attn_params_per_layer * cfg.b,
        expert_total=cfg.L_moe * per_layer,
        expert_per_layer=per_layer,
        expert_per_expert=per_expert,
    )


def f_tok(cfg: ModelConfig) -> float:
    """Per-token forward FLOPs from the activated parameter count."""
    return 2.0 * cfg.n_active


def attention_flops_self(n: int, cfg: ModelConfig) -> float:
    # causal score + value products over n tokens, halved for the mask
    return 2.0 * n * n * cfg.H * cfg.L


def attention_flops_cross(S: int, P: int, cfg: ModelConfig) -> float:
    return 4.0 * S * P * cfg.H * cfg.L


def cost_prefix(n: int, cfg: ModelConfig) -> float:
    """FLOPs to prefill ``n`` uncached prefix tokens."""
    if n < 0:
        raise ValueError(f"prefix token count must be >= 0, got {n}")
    if n == 0:
        return 0.0
    return n * f_tok(cfg) + attention_flops_self(n, cfg)


def cost_suffix(S: int, P: int, cfg: ModelConfig) -> CostBreakdown:
    """FLOPs of an ``S``-token suffix attending to a ``P``-token prefix."""
    if S < 0 or P < 0:
        raise ValueError(f"suffix/prefix lengths must be >= 0, got S={S}, P={P}")
    return CostBreakdown(
        ffn_flops=S * f_tok(cfg),
        self_attn_flops=attention_flops_self(S, cfg),
        cross_attn_flops=attention_flops_cross(S, P, cfg),
    )


def cost_breakdown(P_r: int, M_r: int, S_r: int, cfg: ModelConfig) -> CostBreakdown:
    if not 0 <= M_r <= P_r:
        raise ValueError(f"cached prefix tokens M_r={M_r} outside [0, P_r={P_r}]")
    sfx = cost_suffix(S_r, P_r, cfg)
    return CostBreakdown(
        prefix_flops=cost_prefix(P_r - M_r, cfg),
        ffn_flops=sfx.ffn_flops,
        self_attn_flops=sfx.self_attn_flops,
        cross_attn_flops=sfx.cross_attn_flops,
    )


def cost_delta(P_r: int, M_r: int, S_r: int, cfg: ModelConfig) -> float:
    """Load increment of one request given ``M_r`` already-cached prefix tokens:
    ``cost_prefix(P_r - M_r) + cost_suffix(S_r, P_r)``."""
    if not 0 <= M_r <= P_r:
        raise ValueError(f"cached prefix tokens M_r={M_r} outside [0, P_r={P_r}]")
    return float(cost_delta_exact(P_r, M_r, S_r, cfg))


def cost_delta_exact(P_r: int, M_r: int, S_r: int, cfg: ModelConfig) -> int:
    """``cost_delta`` in exact integer FLOPs; every term is integral."""
    if not 0 <= M_r <= P_r or S_r < 0:
        raise ValueError(f"need 0 <= M_r <= P_r and S_r >= 0, got {M_r}, {P_r}, {S_r}")
    n = P_r - M_r
    HL = cfg.H * cfg.L
    return (n + S_r) * 2 * cfg.n_active + 2 * (n * n + S_r * S_r) * HL + 4 * S_r * P_r * HL


def linear_flops(P_r: int, M_r: int, S_r: int, cfg: ModelConfig) -> float:
    """Token-linear (GEMM) part of ``cost_delta``; the rest is attention."""
    return (P_r - M_r + S_r) * f_tok(cfg)


def gemm_efficiency(tokens: float, curve: EfficiencyCurve) -> float:
    if tokens < 0:
        raise ValueError(f"token count must be >= 0, got {tokens}")
    return max(curve.eta_min, curve.eta_max * min(1.0, tokens / curve.tau_sat))
