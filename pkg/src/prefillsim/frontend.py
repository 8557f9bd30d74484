"""Prefix-, compute- and overlap-aware request router.

The router keeps, per GPU, a block table of committed (materialized) and
pending (promised by routed requests) KV block hashes plus a FLOPs load
counter. One scheduling round walks the FIFO queue, sends each request to
the unsaturated GPU with the longest block match (ties: lowest load, then
lowest index), charges the prefix-credited FLOPs and retires a GPU from the
round once its load reaches the threshold ``T``.

Engine feedback arrives as an ordered stream of events (see ``on_engine_event``).
Loads are exact integers (every FLOPs term is integral), so enqueued minus
discharged work always equals the summed loads.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from itertools import islice
from operator import attrgetter
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .backend import Calibration, fallback_threshold, ratio_threshold
from .config import ModelConfig
from .costmodel import cost_delta_exact

log = logging.getLogger(__name__)

# One key for every component, so chains agree across processes.
HASH_KEY = b"prefillsim/block-hash/v1"
DEFAULT_BLOCK_SIZE = 16


def block_hash_chain(token_ids: Sequence[int], block_size: int = DEFAULT_BLOCK_SIZE) -> list[int]:
    """Chained 64-bit hashes of the full blocks of ``token_ids``.

    Block ``i`` hashes the previous digest together with its tokens, so a
    match on block ``i`` implies matches on every earlier block. A trailing
    partial block is not hashed.
    """
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    tokens = np.asarray(token_ids, dtype="<i8")
    n_blocks = len(tokens) // block_size
    raw = tokens[: n_blocks * block_size].tobytes()
    width = block_size * 8
    chain = []
    prev = b""
    for i in range(n_blocks):
        digest = hashlib.blake2b(prev + raw[i * width:(i + 1) * width], digest_size=8,
                                 key=HASH_KEY).digest()
        chain.append(int.from_bytes(digest, "little"))
        prev = digest
    return chain


@dataclass(frozen=True)
class Request:
    id: str
    prefix_blocks: tuple[int, ...]
    prefix_len: int
    suffix_len: int
    arrival_s: float = 0.0
    group_id: str = ""
    candidate_count: int = 1

    @property
    def total_tokens(self) -> int:
        return self.prefix_len + self.suffix_len

    def validate(self, block_size: int) -> None:
        n = len(self.prefix_blocks)
        if self.suffix_len < 0 or self.prefix_len < 0:
            raise ValueError(f"request {self.id}: negative length")
        if not n * block_size <= self.prefix_len < (n + 1) * block_size:
            raise ValueError(f"request {self.id}: {n} blocks of {block_size} tokens "
                             f"inconsistent with prefix_len={self.prefix_len}")


class BlockTable:
    """Committed blocks in LRU order (bounded by ``budget_blocks``) and pending
    blocks mapped to the request that first promised them.

    ``committed`` is an insertion-ordered dict whose first key is the least
    recently used block; a refresh deletes and reinserts.
    """

    def __init__(self, budget_blocks: Optional[int] = None) -> None:
        if budget_blocks is not None and budget_blocks < 0:
            raise ValueError("block budget must be >= 0")
        self.committed: dict[int, None] = {}
        self.pending: dict[int, str] = {}
        self.budget_blocks = budget_blocks
        self._promised: dict[str, tuple[int, ...]] = {}

    def __contains__(self, block: int) -> bool:
        return block in self.committed or block in self.pending

    def lru_order(self) -> list[int]:
        """Committed blocks, least recently used first."""
        return list(self.committed)

    def add_pending(self, blocks: Sequence[int], request_id: str) -> None:
        fresh = dict.fromkeys(blocks, request_id)
        for h in fresh.keys() & self.pending.keys():
            del fresh[h]
        self.pending.update(fresh)
        self._promised[request_id] = tuple(fresh)

    def _refresh(self, blocks: Sequence[int]) -> None:
        committed = self.committed
        for h in [h for h in blocks if h in committed]:
            del committed[h]
        committed.update(dict.fromkeys(blocks))

    def store(self, blocks: Sequence[int]) -> list[int]:
        """Promote blocks to committed (most recently used); returns LRU evictions."""
        blocks = list(dict.fromkeys(blocks))
        pending = self.pending
        for h in [h for h in blocks if h in pending]:
            del pending[h]
        self._refresh(blocks)
        overflow = 0 if self.budget_blocks is None else len(self.committed) - self.budget_blocks
        if overflow <= 0:
            return []
        victims = list(islice(self.committed, overflow))
        for h in victims:
            del self.committed[h]
        return victims

    def evict(self, blocks: Iterable[int]) -> None:
        committed = self.committed
        for h in [h for h in dict.fromkeys(blocks) if h in committed]:
            del committed[h]

    def abort(self, request_id: str) -> None:
        for h in self._promised.pop(request_id, ()):
            if self.pending.get(h) == request_id:
                del self.pending[h]

    def release(self, request_id: str) -> None:
        """Forget which blocks a finished request promised."""
        self._promised.pop(request_id, None)

    def touch(self, blocks: Sequence[int]) -> None:
        self._refresh([h for h in dict.fromkeys(blocks) if h in self.committed])


def longest_match(table: BlockTable, request: Request) -> int:
    """Number of leading prefix blocks of ``request`` present in ``table``."""
    m = 0
    for h in request.prefix_blocks:
        if h not in table:
            break
        m += 1
    return m


# ---------------------------------------------------------------------------
# Engine events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlocksStored:
    gpu: int
    hashes: tuple[int, ...]


@dataclass(frozen=True)
class BlocksEvicted:
    gpu: int
    hashes: tuple[int, ...]


@dataclass(frozen=True)
class Progress:
    """Prompt tokens executed; ``request_id`` enables per-request proration."""

    gpu: int
    tokens: int
    request_id: Optional[str] = None


@dataclass(frozen=True)
class ThresholdReport:
    t_c: float
    t_e: float
    c_dummy: float


@dataclass(frozen=True)
class RequestAborted:
    gpu: int
    request_id: str


EngineEvent = Union[BlocksStored, BlocksEvicted, Progress, ThresholdReport, RequestAborted]

_EVENT_TYPES = {
    "blocks_stored": BlocksStored,
    "blocks_evicted": BlocksEvicted,
    "progress": Progress,
    "threshold": ThresholdReport,
    "request_aborted": RequestAborted,
}


def event_to_record(event: EngineEvent) -> dict:
    name = next(k for k, v in _EVENT_TYPES.items() if isinstance(event, v))
    record = {"type": name}
    for key, value in vars(event).items():
        record[key] = list(value) if isinstance(value, tuple) else value
    return record


def event_from_record(record: dict) -> EngineEvent:
    record = dict(record)
    cls = _EVENT_TYPES[record.pop("type")]
    if "hashes" in record:
        record["hashes"] = tuple(record["hashes"])
    return cls(**record)


# ---------------------------------------------------------------------------
# Router state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManualThreshold:
    T: float


FALLBACK = "fallback"


@dataclass
class _Charge:
    gpu: int
    delta: int
    tokens: int
    done_tokens: int = 0
    done: int = 0


@dataclass
class RouterState:
    """Shadow state of ``n_gpus`` engines as seen by the router.

    ``decay`` selects how progress events discharge load: ``"prorated"``
    removes each request's own charge in proportion to its executed tokens;
    ``"ftok"`` subtracts ``tokens * f_tok`` floored at zero.
    """

    n_gpus: int
    cfg: ModelConfig
    n_ref: int
    gamma: float = 1.2
    block_size: int = DEFAULT_BLOCK_SIZE
    budget_blocks: Optional[int] = None
    decay: str = "prorated"
    tables: list[BlockTable] = field(init=False)
    _loads: list[int] = field(init=False)
    T: float = field(init=False)
    threshold_source: str = field(init=False, default=FALLBACK)
    enqueued: int = field(init=False, default=0)
    discharged: int = field(init=False, default=0)
    charges: dict[str, _Charge] = field(init=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_gpus < 1:
            raise ValueError("router needs at least one GPU")
        if self.decay not in ("prorated", "ftok"):
            raise ValueError(f"unknown decay mode {self.decay!r}")
        self.tables = [BlockTable(self.budget_blocks) for _ in range(self.n_gpus)]
        self._loads = [0] * self.n_gpus
        self.T = fallback_threshold(self.cfg, self.n_ref, self.gamma)
        self.f_tok = 2 * self.cfg.n_active

    @property
    def loads(self) -> list[float]:
        return [float(x) for x in self._loads]

    def load(self, gpu: int) -> int:
        return self._loads[gpu]

    def active(self) -> list[int]:
        return [i for i, x in enumerate(self._loads) if x < self.T]

    def outstanding(self) -> int:
        return self.enqueued - self.discharged


def install_threshold(state: RouterState,
                      source: Union[Calibration, ThresholdReport, ManualThreshold, str]) -> RouterState:
    """Install ``T``: a manual pin always wins, calibration only applies while
    nothing is pinned, ``"fallback"`` restores ``gamma * f_tok * n_ref``."""
    if isinstance(source, ManualThreshold):
        if source.T <= 0:
            raise ValueError(f"threshold must be positive, got {source.T}")
        state.T = float(source.T)
        state.threshold_source = "manual"
        return state
    if state.threshold_source == "manual":
        log.debug("threshold pinned at %g; ignoring %r", state.T, source)
        return state
    if source == FALLBACK:
        T = fallback_threshold(state.cfg, state.n_ref, state.gamma)
        label = FALLBACK
    elif isinstance(source, (Calibration, ThresholdReport)):
        T = ratio_threshold(source.t_c, source.t_e, source.c_dummy, state.gamma)
        label = "calibration"
    else:
        raise ValueError(f"unknown threshold source {source!r}")
    if T <= 0:
        raise ValueError(f"threshold must be positive, got {T}")
    state.T = T
    state.threshold_source = label
    return state


def _discharge(state: RouterState, gpu: int, amount: int) -> None:
    state._loads[gpu] -= amount
    state.discharged += amount


def on_engine_event(state: RouterState, event: EngineEvent) -> RouterState:
    if isinstance(event, Progress):
        _on_progress(state, event)
    elif isinstance(event, BlocksStored):
        evicted = state.tables[event.gpu].store(event.hashes)
        if evicted:
            log.debug("gpu %d evicted %d blocks over budget", event.gpu, len(evicted))
    elif isinstance(event, BlocksEvicted):
        state.tables[event.gpu].evict(event.hashes)
    elif isinstance(event, ThresholdReport):
        install_threshold(state, event)
    elif isinstance(event, RequestAborted):
        state.tables[event.gpu].abort(event.request_id)
        charge = state.charges.pop(event.request_id, None)
        if charge is not None:
            # refund what is still outstanding
            _discharge(state, charge.gpu, min(state._loads[charge.gpu], charge.delta - charge.done))
    else:
        raise TypeError(f"unknown engine event {event!r}")
    return state


def _on_progress(state: RouterState, event: Progress) -> None:
    if event.tokens < 0:
        raise ValueError("progress token count must be >= 0")
    gpu = event.gpu
    charge = state.charges.get(event.request_id)
    finished = False
    if charge is not None:
        if charge.gpu != gpu:
            raise ValueError(f"request {event.request_id} is charged to gpu {charge.gpu}, "
                             f"not {gpu}")
        charge.done_tokens = min(charge.tokens, charge.done_tokens + event.tokens)
        finished = charge.done_tokens >= charge.tokens
        if finished:
            del state.charges[event.request_id]
            state.tables[gpu].release(event.request_id)
    if charge is not None and state.decay == "prorated":
        if finished:
            amount = charge.delta - charge.done
        else:
            amount = charge.delta * charge.done_tokens // charge.tokens - charge.done
        charge.done += amount
    else:
        amount = min(state._loads[gpu], event.tokens * state.f_tok)
        if charge is not None:
            charge.done = min(charge.delta, charge.done + amount)
    _discharge(state, gpu, amount)


# ---------------------------------------------------------------------------
# Scheduling round
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    request: Request
    gpu: int
    matched_blocks: int
    cached_tokens: int
    delta: float


@dataclass
class RoundResult:
    assignments: list[Assignment]
    residual: list[Request]

    def by_gpu(self, n_gpus: int) -> list[list[Assignment]]:
        out: list[list[Assignment]] = [[] for _ in range(n_gpus)]
        for a in self.assignments:
            out[a.gpu].append(a)
        return out


def schedule_round(queue: Sequence[Request], state: RouterState,
                   cfg: Optional[ModelConfig] = None, presorted: bool = False) -> RoundResult:
    """Run one saturation-bounded assignment pass over ``queue`` (arrival order).

    ``presorted`` skips the sort for a queue already in arrival order, such as
    the residual of a previous round.
    """
    cfg = cfg or state.cfg
    active = state.active()
    # stable: equal arrival times keep queue order
    ordered = list(queue) if presorted else sorted(queue, key=attrgetter("arrival_s"))
    assignments: list[Assignment] = []
    residual: list[Request] = []
    for pos, req in enumerate(ordered):
        if not active:
            residual = ordered[pos:]
            break
        req.validate(state.block_size)
        if req.id in state.charges:
            raise ValueError(f"request {req.id} is already routed")
        best, best_m = active[0], -1
        for i in active:
            m = longest_match(state.tables[i], req)
            if m > best_m or (m == best_m and state._loads[i] < state._loads[best]):
                best, best_m = i, m
        cached = min(best_m * state.block_size, req.prefix_len)
        delta = cost_delta_exact(req.prefix_len, cached, req.suffix_len, cfg)
        state._loads[best] += delta
        state.enqueued += delta
        state.charges[req.id] = _Charge(best, delta, req.prefix_len - cached + req.suffix_len)
        table = state.tables[best]
        if best_m:
            table.touch(req.prefix_blocks[:best_m])
        table.add_pending(req.prefix_blocks[best_m:], req.id)
        assignments.append(Assignment(req, best, best_m, cached, float(delta)))
        if state._loads[best] >= state.T:
            active.remove(best)
    return RoundResult(assignments, residual)
