"""Set-associative software cache simulator for embedding rows.

Rows map to sets by id modulo num_sets; replacement is LRU or LFU with ties
broken by recency then lowest line index. The default 32-way associativity
mirrors the warp-sized layout the cache models.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .errors import EmptyTrace, InvalidValue


class ReplacementPolicy(str, Enum):
    LRU = "lru"
    LFU = "lfu"


@dataclass(frozen=True)
class CacheConfig:
    num_sets: int
    ways: int = 32
    policy: ReplacementPolicy = ReplacementPolicy.LRU

    def __post_init__(self):
        if self.num_sets < 1:
            raise InvalidValue("num_sets", "must be >= 1")
        if self.ways < 1:
            raise InvalidValue("ways", "must be >= 1")

    @property
    def capacity_rows(self) -> int:
        return self.num_sets * self.ways


@dataclass
class _Line:
    row_id: int
    last_used: int
    frequency: int


@dataclass(frozen=True)
class AccessResult:
    hit: bool
    evicted: Optional[int] = None


class CacheState:
    """Mutable simulator state; single-owner, not shared across threads."""

    def __init__(self, config: CacheConfig):
        self.config = config
        self.sets: list[list[_Line]] = [[] for _ in range(config.num_sets)]
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self._clock = 0

    def resident(self, row_id: int) -> bool:
        lines = self.sets[row_id % self.config.num_sets]
        return any(line.row_id == row_id for line in lines)


def access(state: CacheState, row_id: int) -> AccessResult:
    """One row lookup: hit refreshes the line, miss inserts and may evict."""
    if row_id < 0:
        raise InvalidValue("row_id", "must be >= 0")
    cfg = state.config
    lines = state.sets[row_id % cfg.num_sets]
    state._clock += 1
    for line in lines:
        if line.row_id == row_id:
            line.last_used = state._clock
            line.frequency += 1
            state.hits += 1
            return AccessResult(hit=True)
    state.misses += 1
    evicted = None
    if len(lines) >= cfg.ways:
        if cfg.policy is ReplacementPolicy.LRU:
            victim_idx = min(
                range(len(lines)), key=lambda i: (lines[i].last_used, i)
            )
        else:  # LFU: frequency, then recency, then lowest line index
            victim_idx = min(
                range(len(lines)),
                key=lambda i: (lines[i].frequency, lines[i].last_used, i),
            )
        evicted = lines[victim_idx].row_id
        del lines[victim_idx]
        state.evictions += 1
    lines.append(_Line(row_id=row_id, last_used=state._clock, frequency=1))
    return AccessResult(hit=False, evicted=evicted)


@dataclass(frozen=True)
class TraceStats:
    hits: int
    misses: int
    evictions: int

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses


def simulate_trace(config: CacheConfig, trace: Iterable[int]) -> TraceStats:
    state = CacheState(config)
    count = 0
    for row_id in trace:
        access(state, int(row_id))
        count += 1
    if count == 0:
        raise EmptyTrace("hit rate is undefined on an empty trace")
    return TraceStats(hits=state.hits, misses=state.misses, evictions=state.evictions)


def effective_row_bandwidth(hit_rate: float, hbm_bw: float, backing_bw: float) -> float:
    """Harmonic blend of the cached and backing tiers:
    1 / (h / hbm + (1 - h) / backing)."""
    if not 0 <= hit_rate <= 1:
        raise InvalidValue("hit_rate", "must be in [0, 1]")
    if not hbm_bw > 0 or not backing_bw > 0:
        raise InvalidValue("bandwidth", "must be > 0")
    return 1.0 / (hit_rate / hbm_bw + (1.0 - hit_rate) / backing_bw)


def make_scan_hot_trace() -> list[int]:
    """Deterministic scan-plus-hot-set trace where LFU beats LRU.

    A small hot set is re-touched between bursts of one-shot scan rows; the
    scan floods every set past its associativity, so LRU keeps evicting the
    hot rows while LFU retains them.
    """
    num_sets, ways = 4, 8
    hot = list(range(num_sets * ways // 2))  # 16 rows, 4 per set
    trace: list[int] = []
    next_cold = num_sets * ways
    for _ in range(40):
        for _ in range(3):
            trace.extend(hot)
        scan = [next_cold + i for i in range(3 * num_sets * ways)]
        next_cold += len(scan)
        trace.extend(scan)
    trace.extend(hot)
    return trace
