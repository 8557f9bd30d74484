"""Experiment configs, the strategy x parallel-degree sweep driver and reports.

A cell (one strategy at one degree ``P``) is checked for HBM feasibility,
then the trace is routed round by round through the scheduler and every
round's per-engine batches are simulated. Rounds run back to back: a round's
wall time is its slowest device, after which engines report progress and
block-cache events to the router.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from .backend import (
    SkewModel,
    WorkItem,
    batch_elapsed,
    calibrate_threshold,
    engine_count,
    feasibility_check,
    kv_shard,
    simulate_batch,
)
from .comm import Strategy, StrategyKind
from .config import (
    CLUSTER_PRESETS,
    MODEL_PRESETS,
    ClusterConfig,
    EfficiencyCurve,
    LinkModel,
    ModelConfig,
)
from .costmodel import kv_bytes
from .frontend import (
    DEFAULT_BLOCK_SIZE,
    BlocksEvicted,
    BlocksStored,
    ManualThreshold,
    Progress,
    Request,
    RouterState,
    ThresholdReport,
    install_threshold,
    on_engine_event,
    schedule_round,
)
from .workload import (
    AGGREGATE_MIXTURE,
    MixtureSource,
    Regime,
    Trace,
    gen_mixture,
    gen_synthetic,
    read_trace,
    regime_of,
)

log = logging.getLogger(__name__)

AUTO = "auto"


class ConfigError(ValueError):
    """Invalid experiment config; the message starts with the offending field path."""


# ---------------------------------------------------------------------------
# Config records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    """A strategy entry; ``offload="auto"`` tries resident experts first and
    falls back to host offload when they do not fit."""

    kind: StrategyKind
    offload: Union[bool, str] = False
    window: int = 2

    def candidates(self) -> list[Strategy]:
        if self.offload == AUTO:
            return [Strategy(self.kind), Strategy(self.kind, offload=True, window=self.window)]
        return [Strategy(self.kind, offload=bool(self.offload), window=self.window)]

    @property
    def label(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class WorkloadSpec:
    """Exactly one of ``trace`` (a file), ``regime`` (synthetic) or ``mixture``."""

    trace: Optional[str] = None
    regime: Optional[str] = None
    S: Optional[int] = None
    N: Optional[int] = None
    prefix_share: float = 0.0
    group_size: int = 8
    mixture: Optional[Union[str, list]] = None
    total_tokens: Optional[float] = None
    arrival_rate: Optional[float] = None


@dataclass(frozen=True)
class SchedulerSpec:
    n_ref: int = 16384
    block_size: int = DEFAULT_BLOCK_SIZE
    decay: str = "prorated"
    kv_free: bool = False
    threshold: Union[str, float] = AUTO  # "auto", "fallback" or a pinned FLOPs value


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    cluster: ClusterConfig
    strategies: tuple[StrategySpec, ...]
    degrees: tuple[int, ...]
    workload: WorkloadSpec
    scheduler: SchedulerSpec = SchedulerSpec()
    skew: SkewModel = SkewModel()
    seed: int = 0
    output: Optional[str] = None
    format: str = "csv"
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies: must be a nonempty list")
        if not self.degrees:
            raise ConfigError("degrees: must be a nonempty list")
        if any(p < 1 for p in self.degrees):
            raise ConfigError("degrees: every parallel degree must be >= 1")
        if self.format not in REPORT_FORMATS:
            raise ConfigError(f"format: expected one of {REPORT_FORMATS}, got {self.format!r}")


# ---------------------------------------------------------------------------
# Strict JSON loading
# ---------------------------------------------------------------------------


def _section(obj: Any, path: str, allowed: Sequence[str], required: Sequence[str] = ()) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{path}.{key}: required")
    return obj


def _build(cls, obj: dict, path: str, base=None):
    """Instantiate dataclass ``cls`` from ``obj`` (over ``base``), prefixing errors with ``path``."""
    try:
        if base is not None:
            return dataclasses.replace(base, **obj)
        return cls(**obj)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _load_model(obj: Any) -> ModelConfig:
    sec = dict(_section(obj, "model", ["preset"] + _field_names(ModelConfig)))
    preset = sec.pop("preset", None)
    if preset is None:
        return _build(ModelConfig, sec, "model")
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"model.preset: unknown preset {preset!r}; known: {sorted(MODEL_PRESETS)}")
    return _build(ModelConfig, sec, "model", MODEL_PRESETS[preset])


def _load_cluster(obj: Any) -> ClusterConfig:
    names = [n for n in _field_names(ClusterConfig) if n != "P"]
    sec = dict(_section(obj, "cluster", ["preset"] + names))
    preset = sec.pop("preset", None)
    base = None
    if preset is not None:
        if preset not in CLUSTER_PRESETS:
            raise ConfigError(f"cluster.preset: unknown preset {preset!r}; "
                              f"known: {sorted(CLUSTER_PRESETS)}")
        base = CLUSTER_PRESETS[preset]
    if "link" in sec:
        link = _section(sec["link"], "cluster.link", _field_names(LinkModel))
        sec["link"] = _build(LinkModel, link, "cluster.link", base.link if base else None)
    if "curve" in sec:
        curve = _section(sec["curve"], "cluster.curve", _field_names(EfficiencyCurve))
        sec["curve"] = _build(EfficiencyCurve, curve, "cluster.curve", base.curve if base else None)
    if base is None:
        sec.setdefault("P", 1)
    return _build(ClusterConfig, sec, "cluster", base)


def _load_strategy(obj: Any, path: str) -> StrategySpec:
    if isinstance(obj, str):
        obj = {"kind": obj}
    sec = _section(obj, path, ["kind", "offload", "window"], ["kind"])
    try:
        kind = StrategyKind(sec["kind"])
    except ValueError:
        raise ConfigError(f"{path}.kind: unknown strategy {sec['kind']!r}; "
                          f"known: {[k.value for k in StrategyKind]}") from None
    offload = sec.get("offload", False)
    if offload not in (True, False, AUTO):
        raise ConfigError(f"{path}.offload: expected true, false or \"auto\"")
    window = sec.get("window", 2)
    if not isinstance(window, int) or window < 1:
        raise ConfigError(f"{path}.window: must be an integer >= 1")
    spec = StrategySpec(kind, offload, window)
    try:
        spec.candidates()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return spec


def _load_workload(obj: Any, base_dir: Path) -> WorkloadSpec:
    sec = _section(obj, "workload", _field_names(WorkloadSpec))
    spec = _build(WorkloadSpec, sec, "workload")
    sources = [k for k in ("trace", "regime", "mixture") if getattr(spec, k) is not None]
    if spec.regime is None and (spec.S is not None or spec.N is not None):
        sources.append("regime")
    if len(sources) != 1:
        raise ConfigError("workload: give exactly one of trace, regime (or S/N), mixture")
    if spec.trace is not None and not (base_dir / spec.trace).exists():
        raise ConfigError(f"workload.trace: no such file {spec.trace!r}")
    if spec.regime is not None and spec.regime not in ("custom",):
        try:
            regime_of(spec.regime)
        except ValueError as exc:
            raise ConfigError(f"workload.regime: {exc}") from None
    if isinstance(spec.mixture, str) and spec.mixture != "aggregate":
        raise ConfigError(f"workload.mixture: unknown mixture {spec.mixture!r}; known: ['aggregate']")
    return spec


def load_config(source: Union[str, Path, dict], base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Parse a JSON experiment config (path or already-decoded object).

    Unknown keys anywhere are errors reported by dotted field path.
    """
    if isinstance(source, dict):
        raw = source
        base_dir = base_dir or Path(".")
    else:
        path = Path(source)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        base_dir = base_dir or path.parent
    top = _section(raw, "config", ["model", "cluster", "strategies", "degrees", "workload",
                                   "scheduler", "skew", "seed", "output", "format"],
                   ["model", "cluster", "strategies", "degrees", "workload"])
    strategies = top["strategies"]
    if not isinstance(strategies, list):
        raise ConfigError("strategies: expected a list")
    degrees = top["degrees"]
    if not isinstance(degrees, list) or not all(isinstance(p, int) for p in degrees):
        raise ConfigError("degrees: expected a list of integers")
    sched = _build(SchedulerSpec, _section(top.get("scheduler", {}), "scheduler",
                                           _field_names(SchedulerSpec)), "scheduler")
    if sched.decay not in ("prorated", "ftok"):
        raise ConfigError(f"scheduler.decay: expected 'prorated' or 'ftok', got {sched.decay!r}")
    if isinstance(sched.threshold, str) and sched.threshold not in (AUTO, "fallback"):
        raise ConfigError(f"scheduler.threshold: expected 'auto', 'fallback' or a number")
    skew = _build(SkewModel, _section(top.get("skew", {}), "skew", _field_names(SkewModel)), "skew")
    seed = top.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    return ExperimentConfig(
        model=_load_model(top["model"]),
        cluster=_load_cluster(top["cluster"]),
        strategies=tuple(_load_strategy(s, f"strategies[{i}]") for i, s in enumerate(strategies)),
        degrees=tuple(degrees),
        workload=_load_workload(top["workload"], base_dir),
        scheduler=sched,
        skew=skew,
        seed=seed,
        output=top.get("output"),
        format=top.get("format", "csv"),
        base_dir=base_dir,
    )


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    strategy: str
    P: int
    feasible: bool
    throughput_tokens_per_s: Optional[float]
    mfu_fraction: Optional[float]
    elapsed_s: Optional[float]
    stall_s: Optional[float]
    peak_hbm_bytes: int
    error: str = ""


def build_trace(spec: WorkloadSpec, seed: int, base_dir: Path = Path(".")) -> Trace:
    if spec.trace is not None:
        return read_trace(base_dir / spec.trace)
    if spec.mixture is not None:
        if spec.mixture == "aggregate":
            sources = AGGREGATE_MIXTURE
        else:
            sources = [(MixtureSource(**s["source"]), s["weight"]) for s in spec.mixture]
        return gen_mixture(sources, seed, spec.total_tokens, arrival_rate=spec.arrival_rate)
    regime = regime_of(spec.regime) if spec.regime not in (None, "custom") else None
    if spec.S is not None or spec.N is not None:
        base = regime or Regime("custom", 0, 0)
        regime = Regime(base.label, spec.S or base.S, spec.N or base.N)
    return gen_synthetic(regime, spec.prefix_share, spec.group_size, seed,
                         arrival_rate=spec.arrival_rate)


def _cell_feasibility(spec: StrategySpec, P: int, cfg: ExperimentConfig, S_max: int):
    """First candidate strategy that fits, else the last candidate's report."""
    n_ref = cfg.scheduler.n_ref
    B_dev = max(1, n_ref // max(S_max, 1))
    B = B_dev * P // engine_count(spec.kind, P)
    kv_free = cfg.scheduler.kv_free and spec.kind is StrategyKind.DP_ASYNCEP
    report = None
    for strategy in spec.candidates():
        report = feasibility_check(strategy, P, B, S_max, cfg.model, cfg.cluster, kv_free=kv_free)
        if report.feasible:
            return strategy, report
    return strategy, report


def _block_budget(strategy: Strategy, P: int, report, cfg: ExperimentConfig) -> Optional[int]:
    """Blocks of cross-round prefix cache an engine can keep in its HBM headroom."""
    block = kv_bytes(1, cfg.scheduler.block_size, cfg.model)
    per_engine = P // engine_count(strategy.kind, P)
    return max(0, report.headroom) * kv_shard(strategy.kind, P, cfg.model) * per_engine // block


def _install(state: RouterState, strategy: Strategy, cluster: ClusterConfig,
             cfg: ExperimentConfig) -> None:
    pin = cfg.scheduler.threshold
    if not isinstance(pin, str):
        install_threshold(state, ManualThreshold(float(pin)))
    elif pin == AUTO and strategy.kind is StrategyKind.DP_ASYNCEP:
        cal = calibrate_threshold(cluster, cfg.model, cfg.scheduler.n_ref, strategy)
        on_engine_event(state, ThresholdReport(cal.t_c, cal.t_e, cal.c_dummy))


def run_cell(spec: StrategySpec, P: int, requests: Sequence[Request], cfg: ExperimentConfig,
             total_tokens: int) -> MetricsRow:
    S_max = max((r.total_tokens for r in requests), default=0)
    strategy, report = _cell_feasibility(spec, P, cfg, S_max)
    label = spec.label + ("+offload" if strategy.offload else "")
    if not report.feasible:
        return MetricsRow(label, P, False, None, None, None, None, report.used_bytes, report.reason)
    cluster = dataclasses.replace(cfg.cluster, P=P)
    engines = engine_count(strategy.kind, P)
    width = P // engines
    kv_free = cfg.scheduler.kv_free and strategy.kind is StrategyKind.DP_ASYNCEP
    state = RouterState(
        n_gpus=engines, cfg=cfg.model, n_ref=cfg.scheduler.n_ref * width,
        gamma=cluster.gamma, block_size=cfg.scheduler.block_size,
        budget_blocks=None if kv_free else _block_budget(strategy, P, report, cfg),
        decay=cfg.scheduler.decay,
    )
    _install(state, strategy, cluster, cfg)

    elapsed = stall = achieved = fill = 0.0
    queue = sorted(requests, key=lambda r: r.arrival_s)
    rnd = 0
    while queue:
        result = schedule_round(queue, state, presorted=True)
        if not result.assignments:
            raise RuntimeError(f"{label} P={P}: router made no progress (T={state.T:g})")
        per_engine = result.by_gpu(engines)
        batches = [[WorkItem(a.request.prefix_len, a.cached_tokens, a.request.suffix_len,
                             a.request.id) for a in group] for group in per_engine]
        timelines = simulate_batch(strategy, batches, cluster, cfg.model, cfg.skew, salt=rnd)
        elapsed += batch_elapsed(timelines)
        stall += max(tl.stall_s for tl in timelines)
        achieved += sum(tl.achieved_flops for tl in timelines)
        fill = max(fill, max(tl.fill_s for tl in timelines))
        for gpu, group in enumerate(per_engine):
            stored = [h for a in group for h in a.request.prefix_blocks]
            for a in group:
                on_engine_event(state, Progress(gpu, a.request.total_tokens - a.cached_tokens,
                                                a.request.id))
            if stored:
                on_engine_event(state, BlocksStored(gpu, tuple(stored)))
                if kv_free:
                    on_engine_event(state, BlocksEvicted(gpu, tuple(stored)))
        queue = result.residual
        rnd += 1
    elapsed += fill  # the pipeline fills once; rounds stream back to back
    mfu = achieved / (elapsed * P * cluster.F_GPU)
    log.info("%s P=%d: %d rounds, %.3g s, mfu %.3f", label, P, rnd, elapsed, mfu)
    return MetricsRow(label, P, True, total_tokens / elapsed, mfu, elapsed, stall,
                      report.used_bytes)


def run_experiment(cfg: ExperimentConfig, trace: Optional[Trace] = None) -> list[MetricsRow]:
    """One row per (strategy, P) cell in config order, degrees ascending.

    Errors inside a cell become an infeasible row carrying the message.
    """
    trace = trace if trace is not None else build_trace(cfg.workload, cfg.seed, cfg.base_dir)
    requests = trace.to_requests()
    if any(r.total_tokens == 0 for r in requests):
        raise ValueError("trace contains zero-length requests")
    total = trace.total_tokens
    rows = []
    for spec in cfg.strategies:
        for P in sorted(cfg.degrees):
            try:
                rows.append(run_cell(spec, P, requests, cfg, total))
            except (ValueError, RuntimeError) as exc:
                log.warning("%s P=%d failed: %s", spec.label, P, exc)
                rows.append(MetricsRow(spec.label, P, False, None, None, None, None, 0, str(exc)))
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


REPORT_FORMATS = ("csv", "json-lines")
REPORT_COLUMNS = tuple(f.name for f in dataclasses.fields(MetricsRow))


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_report(rows: Sequence[MetricsRow], fmt: str = "csv") -> str:
    if not rows:
        raise ValueError("cannot emit an empty report")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_cell(getattr(row, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()
    if fmt == "json-lines":
        return "".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in rows)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def emit_report(rows: Sequence[MetricsRow], path: Union[str, Path], fmt: str = "csv") -> Path:
    text = format_report(rows, fmt)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path


def read_report(path: Union[str, Path], fmt: str = "csv") -> list[MetricsRow]:
    text = Path(path).read_text(encoding="utf-8")
    if fmt == "json-lines":
        return [MetricsRow(**json.loads(line)) for line in text.splitlines() if line.strip()]
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(MetricsRow(
            strategy=rec["strategy"], P=int(rec["P"]), feasible=rec["feasible"] == "true",
            throughput_tokens_per_s=_opt_float(rec["throughput_tokens_per_s"]),
            mfu_fraction=_opt_float(rec["mfu_fraction"]), elapsed_s=_opt_float(rec["elapsed_s"]),
            stall_s=_opt_float(rec["stall_s"]), peak_hbm_bytes=int(rec["peak_hbm_bytes"]),
            error=rec["error"]))
    return rows


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text else None

