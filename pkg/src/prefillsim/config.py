"""Model, hardware and link configuration records plus a few presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a transformer whose FFN blocks are mixtures of experts.

    Field names follow the usual shorthand: ``L`` layers (``L_moe`` of them
    MoE), hidden size ``H``, ``N_kv`` KV heads of dimension ``d_h``, expert
    intermediate size ``h``, ``E`` experts with top-``k`` routing and ``b``
    bytes per element.
    """

    L: int
    L_moe: int
    H: int
    N_kv: int
    d_h: int
    h: int
    E: int
    k: int
    b: int
    n_active: int
    n_total: int
    attn_params_per_layer: int
    name: str = "custom"

    def __post_init__(self) -> None:
        for key in ("L", "L_moe", "H", "N_kv", "d_h", "h", "E", "k",
                    "n_active", "n_total", "attn_params_per_layer"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"ModelConfig.{key} must be a positive integer, got {value!r}")
        if self.b not in (1, 2):
            raise ValueError(f"ModelConfig.b must be 1 or 2, got {self.b!r}")
        if self.k > self.E:
            raise ValueError(f"top-k ({self.k}) exceeds expert count ({self.E})")
        if self.L_moe > self.L:
            raise ValueError(f"L_moe ({self.L_moe}) exceeds L ({self.L})")
        if self.n_active > self.n_total:
            raise ValueError("n_active exceeds n_total")


@dataclass(frozen=True)
class EfficiencyCurve:
    """Piecewise-linear GEMM efficiency as a function of per-kernel tokens."""

    eta_max: float
    tau_sat: float
    eta_min: float

    def __post_init__(self) -> None:
        if not 0 < self.eta_min <= self.eta_max <= 1:
            raise ValueError(
                f"need 0 < eta_min <= eta_max <= 1, got {self.eta_min}, {self.eta_max}")
        if self.tau_sat <= 0:
            raise ValueError(f"tau_sat must be positive, got {self.tau_sat}")


@dataclass(frozen=True)
class LinkModel:
    nvlink_bw: float  # bytes/s, device-to-device
    pcie_bw: float  # bytes/s, host-to-device
    latency_floor: float = 0.0  # seconds per transfer

    def __post_init__(self) -> None:
        if self.nvlink_bw <= 0 or self.pcie_bw <= 0:
            raise ValueError("link bandwidths must be positive")
        if self.latency_floor < 0:
            raise ValueError("latency_floor must be non-negative")


@dataclass(frozen=True)
class ClusterConfig:
    """A homogeneous group of ``P`` GPUs.

    ``chunk_tokens`` caps the per-kernel token count of engines that run
    chunked prefill; ``None`` disables chunking.
    """

    P: int
    F_GPU: float
    hbm_bytes: int
    link: LinkModel
    gamma: float = 1.2
    curve: EfficiencyCurve = field(default_factory=lambda: EfficiencyCurve(0.4, 8192, 0.02))
    chunk_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if self.P < 1:
            raise ValueError(f"P must be >= 1, got {self.P}")
        if self.F_GPU <= 0:
            raise ValueError("F_GPU must be positive")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.hbm_bytes <= 0:
            raise ValueError("hbm_bytes must be positive")
        if self.chunk_tokens is not None and self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1 when set")


GB = 10**9

# Qwen3-235B-A22B. Attention per layer: q/o projections 4096x8192, k/v
# projections 4096x512, router 4096x128, plus q/k/layer norms.
QWEN3_235B = ModelConfig(
    name="qwen3-235b-a22b",
    L=94, L_moe=94, H=4096, N_kv=4, d_h=128, h=1536, E=128, k=8, b=1,
    n_active=22 * 10**9, n_total=235 * 10**9,
    attn_params_per_layer=71_835_904,
)

QWEN3_30B = ModelConfig(
    name="qwen3-30b-a3b",
    L=48, L_moe=48, H=2048, N_kv=4, d_h=128, h=768, E=128, k=8, b=2,
    n_active=3 * 10**9, n_total=30 * 10**9,
    attn_params_per_layer=19_140_864,
)

H100_FP8 = ClusterConfig(
    P=8,
    F_GPU=1.979e15,
    hbm_bytes=80 * GB,
    link=LinkModel(nvlink_bw=200e9, pcie_bw=50e9, latency_floor=20e-6),
    gamma=1.2,
    curve=EfficiencyCurve(eta_max=0.40, tau_sat=8192, eta_min=0.02),
    chunk_tokens=8192,
)

MODEL_PRESETS = {m.name: m for m in (QWEN3_235B, QWEN3_30B)}
CLUSTER_PRESETS = {"h100-fp8": H100_FP8}
