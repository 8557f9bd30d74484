"""Runtime invariant suite behind ``prefillsim validate``.

Each check exercises one contract of the cost model, simulator or router on
the model and cluster of an experiment config and reports pass/fail with a
short detail string.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backend import (
    WorkItem,
    calibrate_threshold,
    ratio_threshold,
    simulate_batch,
)
from .comm import Strategy, StrategyKind, per_layer_comm_bytes
from .costmodel import cost_delta_exact, cost_prefix, cost_suffix
from .experiment import ExperimentConfig
from .frontend import Progress, Request, RouterState, on_engine_event, schedule_round


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _random_requests(rng: np.random.Generator, n: int, block_size: int) -> list[Request]:
    out = []
    for i in range(n):
        blocks = int(rng.integers(1, 64))
        chain = tuple(int(x) for x in rng.integers(0, 2**62, size=blocks))
        out.append(Request(f"q{i}", chain, blocks * block_size, int(rng.integers(1, 64))))
    return out


def check_p1_comm(cfg: ExperimentConfig) -> CheckResult:
    bad = [k.value for k in StrategyKind if k is not StrategyKind.PP_PP
           and per_layer_comm_bytes(k, 1, 4, 512, cfg.model) != 0]
    return CheckResult("comm bytes vanish at P=1", not bad, ", ".join(bad))


def check_delta_split(cfg: ExperimentConfig) -> CheckResult:
    m = cfg.model
    exact = cost_delta_exact(4096, 1024, 16, m)
    parts = cost_prefix(3072, m) + cost_suffix(16, 4096, m).total_flops
    ok = abs(exact - parts) <= 1e-12 * exact
    return CheckResult("load increment = prefix + suffix cost", ok, f"{exact} vs {parts}")


def check_threshold_collapse(cfg: ExperimentConfig) -> CheckResult:
    gamma = cfg.cluster.gamma
    T = ratio_threshold(2.0, 1.0, 1e12, gamma)
    return CheckResult("ratio threshold collapses when t_e <= t_c", T == gamma * 1e12, f"T={T}")


def check_overlap(cfg: ExperimentConfig) -> CheckResult:
    P = max(cfg.degrees)
    cluster = dataclasses.replace(cfg.cluster, P=P)
    cal = calibrate_threshold(cluster, cfg.model, cfg.scheduler.n_ref)
    tokens = int(cal.T / (2 * cfg.model.n_active)) + 1
    batches = [[WorkItem(tokens, 0, 0)] for _ in range(P)]
    tls = simulate_batch(Strategy(StrategyKind.DP_ASYNCEP), batches, cluster, cfg.model)
    stall = max(tl.stall_s for tl in tls)
    return CheckResult("threshold-sized AsyncEP batch hides transfers", stall == 0.0,
                       f"stall {stall:.3g}s at P={P}")


def check_load_band(cfg: ExperimentConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    state = RouterState(4, cfg.model, n_ref=256, gamma=cfg.cluster.gamma,
                        block_size=cfg.scheduler.block_size)
    reqs = _random_requests(rng, 400, state.block_size)
    result = schedule_round(reqs, state)
    top = max(a.delta for a in result.assignments)
    ok = bool(result.residual) and all(state.T <= x <= state.T + top for x in state.loads)
    return CheckResult("saturated loads lie in [T, T + max delta]", ok,
                       f"T={state.T:.3g}, loads={[f'{x:.3g}' for x in state.loads]}")


def check_drift(cfg: ExperimentConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 1)
    state = RouterState(4, cfg.model, n_ref=4096, gamma=cfg.cluster.gamma,
                        block_size=cfg.scheduler.block_size)
    queue = _random_requests(rng, 300, state.block_size)
    while queue:
        result = schedule_round(queue, state)
        for a in result.assignments:
            todo = a.request.total_tokens - a.cached_tokens
            while todo > 0:
                step = int(rng.integers(1, todo + 1))
                on_engine_event(state, Progress(a.gpu, step, a.request.id))
                todo -= step
        queue = result.residual
    ok = sum(state._loads) == state.outstanding() == 0
    return CheckResult("loads drain exactly to zero", ok, f"residual {state.outstanding()}")


CHECKS: tuple[Callable[[ExperimentConfig], CheckResult], ...] = (
    check_p1_comm,
    check_delta_split,
    check_threshold_collapse,
    check_overlap,
    check_load_band,
    check_drift,
)


def run_checks(cfg: ExperimentConfig) -> list[CheckResult]:
    return [check(cfg) for check in CHECKS]
