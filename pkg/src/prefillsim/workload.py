"""Prefill-only request model, synthetic trace generators and trace I/O.

Tokens are abstract integer ids. A request's prefix tokens are a pure
function of its ``group_id``: the id stream of a group is produced by a
keyed hash in counter mode, so any prefix length reproduces the same leading
tokens and the trace file never stores them.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .frontend import DEFAULT_BLOCK_SIZE, Request, block_hash_chain

SUFFIX_TOKENS = 16  # one candidate suffix block
MAX_CANDIDATES = 64
TRACE_FORMAT = "prefill-trace"
TRACE_VERSION = 1

_TOKEN_KEY = b"prefillsim/tokens/v1"
_WORDS_PER_DIGEST = 16  # 64-byte digest as uint32 words


def group_tokens(group_id: str, n: int) -> np.ndarray:
    """First ``n`` token ids of ``group_id``'s prefix stream."""
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    seed = group_id.encode()
    chunks = []
    for counter in range(-(-n // _WORDS_PER_DIGEST)):
        h = hashlib.blake2b(seed + counter.to_bytes(8, "little"), key=_TOKEN_KEY)
        chunks.append(h.digest())
    words = np.frombuffer(b"".join(chunks), dtype="<u4")[:n]
    return words.astype(np.int64)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


class TaskKind(str, enum.Enum):
    SINGLE_TOKEN = "single_token"
    SINGLE_CHOICE = "single_choice"
    MULTI_SELECTION = "multi_selection"


@dataclass(frozen=True)
class Task:
    id: str
    kind: TaskKind
    context_len: int
    candidate_count: int = 2
    group_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.context_len < 0:
            raise ValueError(f"task {self.id}: negative context length")
        if self.kind is not TaskKind.SINGLE_TOKEN and self.candidate_count < 2:
            raise ValueError(f"task {self.id}: {self.kind.value} needs at least 2 candidates, "
                             f"got {self.candidate_count}")
        if self.candidate_count > MAX_CANDIDATES:
            raise ValueError(f"task {self.id}: candidate set of {self.candidate_count} exceeds "
                             f"{MAX_CANDIDATES}")


def reformulate(task: Task, block_size: int = DEFAULT_BLOCK_SIZE) -> list[Request]:
    """Prefill-only requests answering ``task``.

    Single-token and single-choice tasks read their answer off one pass's
    logits. Multi-selection becomes one binary sibling per candidate, all
    sharing the context as prefix and differing only in a short suffix.
    """
    group = task.group_id or task.id
    chain = tuple(block_hash_chain(group_tokens(group, task.context_len), block_size))
    n = task.candidate_count if task.kind is TaskKind.MULTI_SELECTION else 1
    suffix = SUFFIX_TOKENS if task.kind is TaskKind.MULTI_SELECTION else 0
    return [
        Request(id=f"{task.id}/{j}" if n > 1 else task.id, prefix_blocks=chain,
                prefix_len=task.context_len, suffix_len=suffix, group_id=group,
                candidate_count=task.candidate_count)
        for j in range(n)
    ]


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    id: str
    arrival_s: float
    group_id: str
    prefix_len: int
    suffix_len: int
    candidate_count: int = 1

    @property
    def total_tokens(self) -> int:
        return self.prefix_len + self.suffix_len


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    block_size: int = DEFAULT_BLOCK_SIZE

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_tokens(self) -> int:
        return sum(r.total_tokens for r in self.records)

    def to_requests(self) -> list[Request]:
        """Materialize block chains; each group is hashed once at its longest prefix."""
        longest: dict[str, int] = {}
        for r in self.records:
            longest[r.group_id] = max(longest.get(r.group_id, 0), r.prefix_len)
        chains = {g: block_hash_chain(group_tokens(g, n), self.block_size)
                  for g, n in longest.items()}
        return [
            Request(id=r.id, prefix_blocks=tuple(chains[r.group_id][: r.prefix_len // self.block_size]),
                    prefix_len=r.prefix_len, suffix_len=r.suffix_len, arrival_s=r.arrival_s,
                    group_id=r.group_id, candidate_count=r.candidate_count)
            for r in self.records
        ]


@dataclass(frozen=True)
class Regime:
    label: str
    S: int
    N: int

    @property
    def total_tokens(self) -> int:
        return self.S * self.N


# Equal token budgets (10,485,760) across context lengths.
REGIMES = {
    "short": Regime("short", 256, 40960),
    "medium": Regime("medium", 4096, 2560),
    "long": Regime("long", 32768, 320),
    "ultra_long": Regime("ultra_long", 131072, 80),
}

# Labeled defaults for qualitative prefix-share levels.
PREFIX_SHARE = {"high": 0.8, "medium": 0.4, "low": 0.1, "none": 0.0}


def _assign_arrivals(n: int, rng: np.random.Generator, arrival_rate: Optional[float]) -> list[float]:
    if arrival_rate is None:
        return [0.0] * n
    if arrival_rate <= 0:
        raise ValueError(f"arrival_rate must be positive, got {arrival_rate}")
    return np.cumsum(rng.exponential(1.0 / arrival_rate, size=n)).tolist()


def _units(regime: Regime, prefix_share: float, group_size: int, name: str,
           suffix_len: int) -> list[list[TraceRecord]]:
    """Requests of one source bundled by group, in generation order."""
    prefix_len = regime.S - suffix_len
    if prefix_len < 0:
        raise ValueError(f"sequence length {regime.S} shorter than the {suffix_len}-token suffix")
    tag = f"{name}:" if name else ""
    n_shared = round(prefix_share * regime.N)
    units: list[list[TraceRecord]] = []
    idx = 0
    for g, start in enumerate(range(0, n_shared, group_size)):
        members = range(start, min(start + group_size, n_shared))
        units.append([TraceRecord(f"{tag}r{i}", 0.0, f"{tag}g{g}", prefix_len, suffix_len,
                                  len(members)) for i in members])
        idx = members.stop
    for i in range(idx, regime.N):
        units.append([TraceRecord(f"{tag}r{i}", 0.0, f"{tag}u{i}", prefix_len, suffix_len, 1)])
    return units


def _finish(units: list[list[TraceRecord]], seed: int, arrival_rate: Optional[float],
            block_size: int) -> Trace:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(units))
    flat = [rec for j in order for rec in units[j]]
    arrivals = _assign_arrivals(len(flat), rng, arrival_rate)
    records = [TraceRecord(r.id, t, r.group_id, r.prefix_len, r.suffix_len, r.candidate_count)
               for r, t in zip(flat, arrivals)]
    return Trace(records, block_size)


def gen_synthetic(regime: Regime, prefix_share: float = 0.0, group_size: int = 8, seed: int = 0,
                  *, name: str = "", suffix_len: int = SUFFIX_TOKENS,
                  arrival_rate: Optional[float] = None,
                  block_size: int = DEFAULT_BLOCK_SIZE) -> Trace:
    """``regime.N`` requests of ``regime.S`` tokens each.

    A ``prefix_share`` fraction of requests come in sibling groups of
    ``group_size`` sharing their whole prefix; the rest have private prefixes.
    Groups stay contiguous while group order is shuffled under ``seed``.
    """
    if not 0.0 <= prefix_share <= 1.0:
        raise ValueError(f"prefix_share must lie in [0, 1], got {prefix_share}")
    if prefix_share > 0 and group_size < 2:
        raise ValueError(f"group_size must be >= 2 when sharing prefixes, got {group_size}")
    units = _units(regime, prefix_share, group_size, name, suffix_len)
    return _finish(units, seed, arrival_rate, block_size)


@dataclass(frozen=True)
class MixtureSource:
    name: str
    seq_len: int
    prefix_share: float
    group_size: int = 8


# Synthetic stand-in for the six-benchmark aggregate: per-source sequence
# length is total tokens over request count, rounded to a block; weights are
# token totals.
AGGREGATE_MIXTURE: tuple[tuple[MixtureSource, float], ...] = (
    (MixtureSource("moralstories", 144, PREFIX_SHARE["high"], 4), 3.3e6),
    (MixtureSource("mmlu", 240, PREFIX_SHARE["low"], 4), 5.8e6),
    (MixtureSource("boolq", 224, PREFIX_SHARE["low"], 4), 2.7e6),
    (MixtureSource("imdb", 464, PREFIX_SHARE["low"], 4), 5.5e6),
    (MixtureSource("quality", 8752, PREFIX_SHARE["high"], 8), 10.5e6),
    (MixtureSource("arxiv", 16832, PREFIX_SHARE["medium"], 4), 10.1e6),
)


def gen_mixture(sources: Iterable[tuple[MixtureSource, float]], seed: int = 0,
                total_tokens: Optional[float] = None, *,
                arrival_rate: Optional[float] = None,
                block_size: int = DEFAULT_BLOCK_SIZE) -> Trace:
    """Interleave per-source traces sized by token weight.

    With ``total_tokens`` unset the weights are token counts; otherwise they
    are normalized shares of ``total_tokens``. Each source gets the request
    count whose token total is nearest its target.
    """
    sources = list(sources)
    if any(w < 0 for _, w in sources):
        raise ValueError("mixture weights must be >= 0")
    wsum = sum(w for _, w in sources)
    if wsum <= 0:
        raise ValueError("mixture weights must sum to a positive value")
    units: list[list[TraceRecord]] = []
    for src, w in sources:
        target = w if total_tokens is None else total_tokens * w / wsum
        n = round(target / src.seq_len)
        if n == 0:
            continue
        units.extend(_units(Regime(src.name, src.seq_len, n), src.prefix_share, src.group_size,
                            src.name, SUFFIX_TOKENS))
    return _finish(units, seed, arrival_rate, block_size)


# ---------------------------------------------------------------------------
# Trace I/O
# ---------------------------------------------------------------------------


class TraceFormatError(ValueError):
    pass


_FIELDS = ("id", "arrival_s", "group_id", "prefix_len", "suffix_len", "candidate_count")


def write_trace(trace: Trace, path: str | Path) -> None:
    header = {"format": TRACE_FORMAT, "version": TRACE_VERSION, "block_size": trace.block_size}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in trace.records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def _parse_record(obj: object, lineno: int) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceFormatError(f"line {lineno}: expected an object")
    missing = [k for k in _FIELDS if k not in obj]
    extra = [k for k in obj if k not in _FIELDS]
    if missing or extra:
        raise TraceFormatError(f"line {lineno}: missing {missing} / unexpected {extra}")
    for key in ("prefix_len", "suffix_len", "candidate_count"):
        if not isinstance(obj[key], int) or obj[key] < 0:
            raise TraceFormatError(f"line {lineno}: {key} must be a non-negative integer")
    if not isinstance(obj["arrival_s"], (int, float)):
        raise TraceFormatError(f"line {lineno}: arrival_s must be a number")
    return TraceRecord(str(obj["id"]), float(obj["arrival_s"]), str(obj["group_id"]),
                       obj["prefix_len"], obj["suffix_len"], obj["candidate_count"])


def read_trace(path: str | Path) -> Trace:
    """Parse a trace file; an empty file is an empty trace."""
    block_size = DEFAULT_BLOCK_SIZE
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: {exc.msg}") from None
            if lineno == 1 and isinstance(obj, dict) and obj.get("format") == TRACE_FORMAT:
                if obj.get("version") != TRACE_VERSION:
                    raise TraceFormatError(f"line 1: unsupported trace version {obj.get('version')!r}")
                block_size = int(obj.get("block_size", DEFAULT_BLOCK_SIZE))
                continue
            records.append(_parse_record(obj, lineno))
    return Trace(records, block_size)


def regime_of(name: str) -> Regime:
    try:
        return REGIMES[name]
    except KeyError:
        raise ValueError(f"unknown regime {name!r}; expected one of {sorted(REGIMES)}") from None

