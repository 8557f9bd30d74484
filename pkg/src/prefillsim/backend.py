"""Deterministic per-layer timeline simulation of one scheduled batch.

Every strategy is reduced to per-layer, per-device quantities:

* compute: FLOPs divided by ``F_GPU * gemm_efficiency(kernel tokens)``; the
  attention side and the expert side of a layer may see different kernel
  token counts (tensor sharding narrows the GEMMs, chunked prefill caps them);
* on-path communication from the per-layer volume table, serial with compute;
* for AsyncEP, background expert transfers (D2D gather, optional H2D
  prefetch) that only cost time when they outlast the previous layer's compute.

No stochastic jitter is injected. Expert-load skew is drawn from a seeded
generator, so identical inputs give bit-identical timelines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .comm import (
    Strategy,
    StrategyKind,
    asyncep_gather_bytes,
    offload_h2d_bytes,
    per_layer_comm_bytes,
    transfer_time,
)
from .config import ClusterConfig, ModelConfig
from .costmodel import (
    activation_bytes,
    cost_delta,
    f_tok,
    gemm_efficiency,
    kv_bytes,
    linear_flops,
    weight_bytes,
)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# Work description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkItem:
    """One request as executed on a device: ``cached`` prefix tokens are reused."""

    prefix_len: int
    cached: int
    suffix_len: int
    request_id: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.cached <= self.prefix_len:
            raise ValueError(f"cached={self.cached} outside [0, prefix_len={self.prefix_len}]")
        if self.suffix_len < 0:
            raise ValueError("suffix_len must be >= 0")

    @property
    def computed_tokens(self) -> int:
        return self.prefix_len - self.cached + self.suffix_len

    @property
    def total_tokens(self) -> int:
        return self.prefix_len + self.suffix_len

    def flops(self, cfg: ModelConfig) -> float:
        return cost_delta(self.prefix_len, self.cached, self.suffix_len, cfg)

    def linear_flops(self, cfg: ModelConfig) -> float:
        return linear_flops(self.prefix_len, self.cached, self.suffix_len, cfg)


DeviceBatch = Sequence[WorkItem]


@dataclass(frozen=True)
class _Work:
    tokens: int
    linear: float
    attention: float

    @property
    def total(self) -> float:
        return self.linear + self.attention


def _summarize(batch: DeviceBatch, cfg: ModelConfig) -> _Work:
    tokens = 0
    lin = 0.0
    total = 0.0
    for item in batch:
        tokens += item.computed_tokens
        lin += item.linear_flops(cfg)
        total += item.flops(cfg)
    return _Work(tokens, lin, total - lin)


def expert_fraction(cfg: ModelConfig) -> float:
    """Share of per-token linear FLOPs spent inside routed experts."""
    per_token = 2.0 * 3 * cfg.H * cfg.h * cfg.k * cfg.L_moe
    return min(1.0, per_token / f_tok(cfg))


def moe_layers(cfg: ModelConfig) -> range:
    # MoE blocks are taken to be the last L_moe layers
    return range(cfg.L - cfg.L_moe, cfg.L)


# ---------------------------------------------------------------------------
# Expert-load skew
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkewModel:
    """Expert popularity law: ``uniform`` or ``zipf`` with a target max/min ratio."""

    kind: str = "uniform"
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "zipf"):
            raise ValueError(f"unknown skew kind {self.kind!r}")
        if self.ratio < 1:
            raise ValueError(f"skew ratio must be >= 1, got {self.ratio}")


def _apportion(total: int, weights: np.ndarray, cap: int) -> np.ndarray:
    """Largest-remainder split of ``total`` by ``weights``, no entry above ``cap``."""
    n = len(weights)
    counts = np.zeros(n, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    remaining = total
    while remaining > 0:
        w = np.where(free, weights, 0.0)
        exact = remaining * w / w.sum()
        base = np.floor(exact).astype(np.int64)
        short = remaining - int(base.sum())
        if short:
            frac = exact - base
            # stable: larger remainder first, then lower index
            order = np.lexsort((np.arange(n), -frac))
            order = order[free[order]]
            base[order[:short]] += 1
        proposal = counts + base
        over = proposal > cap
        if not over.any():
            counts = proposal
            break
        counts = np.where(over, cap, proposal)
        free &= ~over
        remaining = total - int(counts.sum())
        if not free.any():
            break
    return counts


def _ranked_loads(tokens: int, E: int, k: int, skew: SkewModel) -> np.ndarray:
    """Routed-token counts by popularity rank, heaviest first."""
    if tokens < 0:
        raise ValueError(f"token count must be >= 0, got {tokens}")
    if not 1 <= k <= E:
        raise ValueError(f"need 1 <= k <= E, got k={k}, E={E}")
    if skew.kind == "uniform" or E == 1 or skew.ratio == 1:
        weights = np.ones(E)
    else:
        alpha = math.log(skew.ratio) / math.log(E)
        weights = np.arange(1, E + 1, dtype=np.float64) ** -alpha
    return _apportion(tokens * k, weights, cap=tokens)


def _expert_permutation(E: int, skew: SkewModel, salt: int) -> np.ndarray:
    return np.random.default_rng([skew.seed, salt]).permutation(E)


def draw_expert_loads(tokens: int, E: int, k: int, skew: SkewModel, salt: int = 0) -> np.ndarray:
    """Per-expert routed-token counts summing to ``tokens * k``.

    Zipf weights ``(rank + 1) ** -alpha`` with ``alpha = ln(ratio) / ln(E)``
    make the heaviest/lightest weight ratio equal the target; counts are
    apportioned exactly (each expert sees a token at most once) and then
    assigned to expert ids by a seeded permutation.
    """
    return _ranked_loads(tokens, E, k, skew)[_expert_permutation(E, skew, salt)]


def _split_starts(E: int, P: int) -> np.ndarray:
    # same boundaries as np.array_split
    q, r = divmod(E, P)
    sizes = [q + 1] * r + [q] * (P - r)
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)


def device_expert_shares(counts: np.ndarray, P: int) -> np.ndarray:
    """Fraction of routed tokens landing on each of ``P`` expert-parallel ranks."""
    total = counts.sum()
    if total == 0:
        return np.full(P, 1.0 / P)
    per_device = np.add.reduceat(np.asarray(counts, dtype=np.float64), _split_starts(len(counts), P))
    return per_device / total


# ---------------------------------------------------------------------------
# Timelines
# ---------------------------------------------------------------------------


@dataclass
class LayerRecord:
    layer: int
    start_s: float
    compute_s: float
    onpath_comm_s: float = 0.0
    gather_s: float = 0.0
    h2d_s: float = 0.0
    stall_s: float = 0.0

    @property
    def wall_s(self) -> float:
        return self.stall_s + self.compute_s + self.onpath_comm_s

    @property
    def end_s(self) -> float:
        return self.start_s + self.wall_s


@dataclass
class Timeline:
    """Per-layer records of one device for one batch.

    ``fill_s`` is the one-off pipeline fill a PP engine pays when it starts
    streaming; it is reported separately and not part of ``elapsed_s``.
    """

    device: int
    layers: list[LayerRecord] = field(default_factory=list)
    achieved_flops: float = 0.0
    fill_s: float = 0.0
    tokens: int = 0

    @property
    def elapsed_s(self) -> float:
        return sum(r.wall_s for r in self.layers)

    @property
    def stall_s(self) -> float:
        return sum(r.stall_s for r in self.layers)

    @property
    def compute_s(self) -> float:
        return sum(r.compute_s for r in self.layers)

    def events(self) -> Iterator[dict]:
        """Flat event records: device, layer, kind, start_s, end_s."""
        for r in self.layers:
            t = r.start_s
            if r.stall_s > 0:
                yield _event(self.device, r.layer, "stall", t, t + r.stall_s)
                t += r.stall_s
            if r.gather_s > 0:
                # background channel, issued while the previous layer computed
                yield _event(self.device, r.layer, "d2d_gather", r.start_s + r.stall_s - r.gather_s,
                             r.start_s + r.stall_s)
            if r.h2d_s > 0:
                yield _event(self.device, r.layer, "h2d_prefetch", r.start_s + r.stall_s - r.h2d_s,
                             r.start_s + r.stall_s)
            yield _event(self.device, r.layer, "compute", t, t + r.compute_s)
            t += r.compute_s
            if r.onpath_comm_s > 0:
                yield _event(self.device, r.layer, "onpath_comm", t, t + r.onpath_comm_s)


def _event(device: int, layer: int, kind: str, start: float, end: float) -> dict:
    return {"device": device, "layer": layer, "kind": kind, "start_s": start, "end_s": end}


def _stack(records: list[LayerRecord]) -> list[LayerRecord]:
    t = 0.0
    for r in records:
        r.start_s = t
        t += r.wall_s
    return records


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    weights_bytes: int
    kv_bytes: int
    act_bytes: int
    hbm_bytes: int
    reason: str = ""

    @property
    def used_bytes(self) -> int:
        return self.weights_bytes + self.kv_bytes + self.act_bytes

    @property
    def headroom(self) -> int:
        return self.hbm_bytes - self.used_bytes


def device_weight_bytes(strategy: Strategy, P: int, cfg: ModelConfig) -> int:
    w = weight_bytes(cfg)
    kind = strategy.kind
    attn = _ceil_div(w.attn_total, P) if kind.attention in ("tp", "pp") else w.attn_total
    if kind is StrategyKind.DP_DP:
        experts = w.expert_total
    elif kind is StrategyKind.DP_ASYNCEP:
        # two full-layer staging buffers: the layer computing and the one gathering
        staging = 2 * w.expert_per_layer if (P > 1 or strategy.offload) else 0
        if strategy.offload:
            experts = strategy.window * _ceil_div(w.expert_per_layer, P) + staging
        else:
            experts = _ceil_div(w.expert_total, P) + staging
    else:
        experts = _ceil_div(w.expert_total, P)
    return attn + experts


def kv_shard(kind: StrategyKind, P: int, cfg: ModelConfig) -> int:
    if kind.attention == "tp":
        return min(P, cfg.N_kv)
    if kind.attention in ("pp", "sp"):
        return P
    return 1


def act_shard(kind: StrategyKind, P: int) -> int:
    if kind.experts == "tp" or kind.attention in ("sp", "pp"):
        return P
    return 1


def feasibility_check(strategy: Strategy, P: int, B: int, S: int, cfg: ModelConfig,
                      cluster: ClusterConfig, kv_free: bool = False) -> FeasibilityReport:
    """Per-device HBM check: weights + KV + activations against ``hbm_bytes``.

    ``(B, S)`` is the per-device batch shape. KV-cache-free execution is an
    AsyncEP mode; the offload flag and window come from ``strategy``.
    """
    if strategy.offload and strategy.window < 1:
        raise ValueError("prefetch window must be >= 1 with offload")
    if kv_free and strategy.kind is not StrategyKind.DP_ASYNCEP:
        raise ValueError("kv-cache-free execution is only available with dp_asyncep")
    if P < 1 or B < 0 or S < 0:
        raise ValueError("P must be >= 1 and batch shape non-negative")
    weights = device_weight_bytes(strategy, P, cfg)
    kv = 0 if kv_free else _ceil_div(kv_bytes(B, S, cfg), kv_shard(strategy.kind, P, cfg))
    act = _ceil_div(activation_bytes(B, S, cfg), act_shard(strategy.kind, P))
    used = weights + kv + act
    feasible = used <= cluster.hbm_bytes
    reason = ""
    if not feasible:
        reason = (f"{strategy.name} at P={P} needs {used / 1e9:.1f} GB per device "
                  f"(weights {weights / 1e9:.1f}, kv {kv / 1e9:.1f}, act {act / 1e9:.1f}) "
                  f"> {cluster.hbm_bytes / 1e9:.1f} GB HBM")
    return FeasibilityReport(feasible, weights, kv, act, cluster.hbm_bytes, reason)


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------


def eq1_threshold(t_ep: float, cluster: ClusterConfig) -> float:
    """Literal saturation threshold: transfer time x peak FLOP rate x margin."""
    if t_ep < 0:
        raise ValueError("t_EP must be >= 0")
    return t_ep * cluster.F_GPU * cluster.gamma


def ratio_threshold(t_c: float, t_e: float, c_dummy: float, gamma: float) -> float:
    """``gamma * (t_e / t_c) * c_dummy``, collapsing to ``gamma * c_dummy`` once
    transfers are hidden (``t_e <= t_c``)."""
    if t_c <= 0:
        raise ValueError("t_c must be positive")
    ratio = t_e / t_c if t_e > t_c else 1.0
    return gamma * ratio * c_dummy


def fallback_threshold(cfg: ModelConfig, n_ref: int, gamma: float) -> float:
    return gamma * f_tok(cfg) * n_ref


@dataclass(frozen=True)
class Calibration:
    T: float
    t_c: float
    t_e: float
    c_dummy: float


def calibrate_threshold(cluster: ClusterConfig, cfg: ModelConfig, n_ref: int,
                        strategy: Optional[Strategy] = None) -> Calibration:
    """Profile one dummy AsyncEP forward of ``n_ref`` tokens and derive T.

    ``t_c`` is layer 0's wall time (its experts are resident), ``t_e`` the
    largest wall time of any later layer.
    """
    if n_ref <= 0:
        raise ValueError("n_ref must be positive")
    strategy = strategy or Strategy(StrategyKind.DP_ASYNCEP)
    c_dummy = f_tok(cfg) * n_ref
    per_layer = np.full(cfg.L, c_dummy / cfg.L)
    records = _asyncep_layers(per_layer, n_ref, strategy, cluster, cfg, device=0)
    t_c = records[0].wall_s
    t_e = max((r.wall_s for r in records[1:]), default=t_c)
    return Calibration(ratio_threshold(t_c, t_e, c_dummy, cluster.gamma), t_c, t_e, c_dummy)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def engine_count(kind: StrategyKind, P: int) -> int:
    """DP-attention strategies run one engine per GPU; the others span all P."""
    return P if kind.attention == "dp" else 1


def per_layer_flops(work: _Work, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Split a batch's FLOPs into (non-expert, expert) arrays over layers."""
    frac = expert_fraction(cfg)
    dense = np.full(cfg.L, (work.linear * (1 - frac) + work.attention) / cfg.L)
    expert = np.zeros(cfg.L)
    expert[list(moe_layers(cfg))] = work.linear * frac / cfg.L_moe
    return dense, expert


def layer_transfer_times(strategy: Strategy, cluster: ClusterConfig, cfg: ModelConfig,
                         device: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Background (gather, h2d) seconds needed before each layer can start."""
    P = cluster.P
    link = cluster.link
    gather = np.zeros(cfg.L)
    h2d = np.zeros(cfg.L)
    moe = list(moe_layers(cfg))
    # the first MoE layer is replicated everywhere and needs no transfer
    for layer in moe[1:]:
        if P > 1:
            gather[layer] = transfer_time(asyncep_gather_bytes(P, cfg), link.nvlink_bw,
                                          link.latency_floor)
        if strategy.offload:
            h2d[layer] = transfer_time(offload_h2d_bytes(P, cfg, device), link.pcie_bw,
                                       link.latency_floor)
    return gather, h2d


def _asyncep_layers(flops: np.ndarray, tokens: int, strategy: Strategy,
                    cluster: ClusterConfig, cfg: ModelConfig, device: int) -> list[LayerRecord]:
    eta = gemm_efficiency(tokens, cluster.curve)
    compute = flops / (cluster.F_GPU * eta)
    gather, h2d = layer_transfer_times(strategy, cluster, cfg, device)
    if strategy.offload and strategy.window < 2:
        # a one-layer window leaves no slack: shards land, then the gather runs
        needed = gather + h2d
    else:
        needed = np.maximum(gather, h2d)
    records = []
    for layer in range(cfg.L):
        # layer l's transfer is issued when layer l-1 starts computing
        stall = 0.0
        if layer > 0:
            stall = max(0.0, float(needed[layer] - compute[layer - 1]))
        records.append(LayerRecord(layer, 0.0, float(compute[layer]),
                                   gather_s=float(gather[layer]), h2d_s=float(h2d[layer]),
                                   stall_s=stall))
    return _stack(records)


def _simulate_asyncep(strategy, works, cluster, cfg) -> list[Timeline]:
    out = []
    for device, work in enumerate(works):
        tl = Timeline(device, achieved_flops=work.total, tokens=work.tokens)
        if work.tokens > 0:
            dense, expert = per_layer_flops(work, cfg)
            # every expert is local: skew does not move work between devices
            tl.layers = _asyncep_layers(dense + expert, work.tokens, strategy, cluster, cfg, device)
        out.append(tl)
    return out


def _steps(tokens: int, cluster: ClusterConfig) -> tuple[int, int]:
    """(per-kernel tokens, number of kernel steps) under chunked prefill."""
    if tokens == 0:
        return 0, 0
    chunk = cluster.chunk_tokens
    if chunk is None or tokens <= chunk:
        return tokens, 1
    return chunk, _ceil_div(tokens, chunk)


def _comm_seconds(kind: StrategyKind, P: int, tokens: int, steps: int,
                  cluster: ClusterConfig, cfg: ModelConfig) -> float:
    nbytes = per_layer_comm_bytes(kind, P, 1, tokens, cfg)
    if nbytes == 0:
        return 0.0
    return steps * cluster.link.latency_floor + nbytes / cluster.link.nvlink_bw


def _expert_shares(kind: StrategyKind, tokens: int, P: int, cfg: ModelConfig,
                   skew: SkewModel, salt: int) -> np.ndarray:
    """(L, P) array of each device's share of a layer's expert FLOPs."""
    shares = np.full((cfg.L, P), 1.0 / P)
    if kind.experts != "ep" or P == 1:
        return shares
    ranked = _ranked_loads(tokens, cfg.E, cfg.k, skew)
    total = ranked.sum()
    if total == 0:
        return shares
    starts = _split_starts(cfg.E, P)
    ranked = ranked.astype(np.float64) / total
    for layer in moe_layers(cfg):
        perm = _expert_permutation(cfg.E, skew, salt * cfg.L + layer)
        shares[layer] = np.add.reduceat(ranked[perm], starts)
    return shares


def _simulate_dp_sync(kind, works, cluster, cfg, skew, salt) -> list[Timeline]:
    """DP attention with per-device batches: dp_dp, dp_tp, dp_ep."""
    P = cluster.P
    curve = cluster.curve
    group_tokens = sum(w.tokens for w in works)
    shares = _expert_shares(kind, group_tokens, P, cfg, skew, salt)
    frac = expert_fraction(cfg)
    moe = np.zeros(cfg.L)
    moe[list(moe_layers(cfg))] = 1.0 / cfg.L_moe
    group_expert = sum(w.linear for w in works) * frac * moe  # per layer

    compute = np.zeros((P, cfg.L))
    comm = np.zeros(P)
    steps_max = 0
    for d, work in enumerate(works):
        step, steps = _steps(work.tokens, cluster)
        steps_max = max(steps_max, steps)
        dense, expert = per_layer_flops(work, cfg)
        eta_attn = gemm_efficiency(step, curve)
        eta_exp = gemm_efficiency(step / P if kind.experts == "tp" else step, curve)
        if kind.experts == "ep":
            expert = group_expert * shares[:, d]
        compute[d] = dense / (cluster.F_GPU * eta_attn)
        nz = expert > 0
        compute[d, nz] += expert[nz] / (cluster.F_GPU * eta_exp)
        comm[d] = _comm_seconds(kind, P, work.tokens, steps, cluster, cfg)

    out = []
    barrier = kind is not StrategyKind.DP_DP
    layer_comm = float(comm.max()) if barrier else 0.0
    for d, work in enumerate(works):
        tl = Timeline(d, tokens=work.tokens)
        if kind.experts == "ep":
            tl.achieved_flops = float(
                (per_layer_flops(work, cfg)[0]).sum() + (group_expert * shares[:, d]).sum())
        else:
            tl.achieved_flops = work.total
        if barrier and group_tokens > 0:
            wall = compute.max(axis=0)
            tl.layers = _stack([
                LayerRecord(l, 0.0, float(compute[d, l]), onpath_comm_s=layer_comm,
                            stall_s=float(wall[l] - compute[d, l]))
                for l in range(cfg.L)])
        elif work.tokens > 0:
            tl.layers = _stack([LayerRecord(l, 0.0, float(compute[d, l])) for l in range(cfg.L)])
        out.append(tl)
    return out


def _simulate_sharded(kind, work, cluster, cfg, skew, salt) -> list[Timeline]:
    """One engine spanning all P devices: tp_tp, tp_ep, sp_tp, sp_ep."""
    P = cluster.P
    curve = cluster.curve
    step, steps = _steps(work.tokens, cluster)
    frac = expert_fraction(cfg)
    lin_dense = work.linear * (1 - frac) / cfg.L
    attn = work.attention / cfg.L
    dense_share = np.full(P, 1.0 / P)
    attn_share = np.full(P, 1.0 / P)
    if kind.attention == "sp":
        # causal attention: later sequence shards attend over longer contexts
        attn_share = (2 * np.arange(P) + 1) / (P * P)
    shares = _expert_shares(kind, work.tokens, P, cfg, skew, salt)
    _, expert = per_layer_flops(work, cfg)
    eta_attn = gemm_efficiency(step / P, curve)
    eta_exp = gemm_efficiency(step / P if kind.experts == "tp" else step, curve)

    compute = np.zeros((P, cfg.L))
    flops = np.zeros(P)
    for d in range(P):
        dense_d = lin_dense * dense_share[d] + attn * attn_share[d]
        expert_d = expert * shares[:, d]
        compute[d] = dense_d / (cluster.F_GPU * eta_attn)
        nz = expert_d > 0
        compute[d, nz] += expert_d[nz] / (cluster.F_GPU * eta_exp)
        flops[d] = dense_d * cfg.L + expert_d.sum()
    comm = _comm_seconds(kind, P, work.tokens, steps, cluster, cfg)
    wall = compute.max(axis=0)
    out = []
    for d in range(P):
        tl = Timeline(d, achieved_flops=float(flops[d]), tokens=work.tokens)
        if work.tokens > 0:
            tl.layers = _stack([
                LayerRecord(l, 0.0, float(compute[d, l]), onpath_comm_s=comm,
                            stall_s=float(wall[l] - compute[d, l]))
                for l in range(cfg.L)])
        out.append(tl)
    return out


def _simulate_pipeline(work, cluster, cfg) -> list[Timeline]:
    """Layers split into P equal stages; P micro-batches stream through them.

    Causal attention makes later stages heavier: stage ``s`` carries attention
    load proportional to ``2s + 1`` (its mean context position). Rounds stream
    back to back, so a round costs the bottleneck stage; the fill bubble is
    reported once in ``fill_s``.
    """
    P = cluster.P
    stages = np.array_split(np.arange(cfg.L), P)
    step, steps = _steps(work.tokens, cluster)
    micro = min(step, _ceil_div(work.tokens, P)) if work.tokens else 0
    eta = gemm_efficiency(micro, cluster.curve)
    dense, expert = per_layer_flops(_Work(work.tokens, work.linear, 0.0), cfg)
    # stage s takes (2s + 1) / P^2 of the attention, spread over its layers
    attn = np.concatenate([np.full(len(s), work.attention * (2 * i + 1) / (P * P * len(s)))
                           for i, s in enumerate(stages)])
    flops = dense + expert + attn
    send = 0.0
    nbytes = per_layer_comm_bytes(StrategyKind.PP_PP, P, 1, work.tokens, cfg)
    if P > 1 and nbytes:
        send = nbytes / cluster.link.nvlink_bw

    out = []
    for s, layers in enumerate(stages):
        tl = Timeline(s, achieved_flops=float(flops[layers].sum()), tokens=work.tokens)
        if work.tokens > 0:
            records = [LayerRecord(int(l), 0.0, float(flops[l] / (cluster.F_GPU * eta)),
                                   onpath_comm_s=send) for l in layers]
            if records and P > 1:
                records[-1].onpath_comm_s += steps * cluster.link.latency_floor
            tl.layers = _stack(records)
        out.append(tl)
    bottleneck = max(tl.elapsed_s for tl in out)
    for tl in out:
        if tl.layers:
            # faster stages idle at their entry, paced by the bottleneck stage
            tl.layers[0].stall_s += bottleneck - tl.elapsed_s
            _stack(tl.layers)
        tl.fill_s = bottleneck * (P - 1) / P
    return out


def simulate_batch(strategy: Strategy, batches: Sequence[DeviceBatch], cluster: ClusterConfig,
                   cfg: ModelConfig, skew: SkewModel = SkewModel(), salt: int = 0,
                   feasibility: Optional[FeasibilityReport] = None) -> list[Timeline]:
    """Simulate one scheduled batch; returns one Timeline per device.

    ``batches`` holds one entry per engine: ``P`` entries for DP-attention
    strategies, a single entry for strategies whose engine spans all GPUs.
    ``salt`` decorrelates skew draws between successive batches.
    """
    kind = strategy.kind
    if feasibility is not None and not feasibility.feasible:
        raise ValueError(f"infeasible configuration: {feasibility.reason}")
    expected = engine_count(kind, cluster.P)
    if len(batches) != expected:
        raise ValueError(f"{kind.value} at P={cluster.P} expects {expected} engine batches, "
                         f"got {len(batches)}")
    works = [_summarize(b, cfg) for b in batches]
    if sum(w.tokens for w in works) == 0:
        raise ValueError("cannot simulate an empty batch")
    if kind.experts == "ep" and cfg.E < cluster.P:
        raise ValueError(f"expert parallelism over {cluster.P} devices needs E >= P")
    if kind is StrategyKind.DP_ASYNCEP:
        return _simulate_asyncep(strategy, works, cluster, cfg)
    if kind is StrategyKind.PP_PP:
        return _simulate_pipeline(works[0], cluster, cfg)
    if kind.attention == "dp":
        return _simulate_dp_sync(kind, works, cluster, cfg, skew, salt)
    return _simulate_sharded(kind, works[0], cluster, cfg, skew, salt)


def batch_elapsed(timelines: Sequence[Timeline]) -> float:
    return max((tl.elapsed_s for tl in timelines), default=0.0)


def write_event_log(timelines: Sequence[Timeline], path) -> int:
    """Write one JSON record per event; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for tl in timelines:
            for ev in tl.events():
                fh.write(json.dumps(ev) + "\n")
                n += 1
    return n
