"""Phase-multiplexed greedy FCFS scheduler.

Each iteration packs running requests plus newly admitted ones into one
batch whose query tokens stay within ``max_num_batched_tokens``.  A request
in Refresh costs its full sequence, one in Reuse only its active block, so
the budget released by Refresh->Reuse transitions is handed straight to the
head of the waiting queue.

``RequestLevelStatic`` mode is the ablation baseline: every running request
is charged its full sequence for its whole lifetime.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field, replace
from typing import Optional

from .core import Phase, Request, ServeConfig, advance, logit_tokens, phase_at_step, query_tokens
from .membudget import kv_request_slots
from .sparse_kv import KvPool, kv_alloc, kv_free


class SchedMode(str, enum.Enum):
    MULTIPLEXED = "multiplexed"
    STATIC = "static"


class Unschedulable(ValueError):
    """The request can never fit the token budget or the KV pool."""


@dataclass(frozen=True)
class BatchEntry:
    request_id: int
    phase: Phase
    query_tokens: int
    logit_tokens: int
    offset: int
    charged_tokens: int
    admitted: bool = False


@dataclass
class StepBatch:
    entries: list = field(default_factory=list)
    total_query_tokens: int = 0
    total_logit_tokens: int = 0
    total_charged_tokens: int = 0
    deferred: list = field(default_factory=list)

    def add(self, req: Request, phase: Phase, cfg: ServeConfig, charged: int, admitted: bool = False) -> None:
        q = query_tokens(req, phase, cfg)
        self.entries.append(BatchEntry(req.id, phase, q, logit_tokens(req, phase, cfg),
                                       self.total_query_tokens, charged, admitted))
        self.total_query_tokens += q
        self.total_logit_tokens += self.entries[-1].logit_tokens
        self.total_charged_tokens += charged

    @property
    def request_ids(self) -> list:
        return [e.request_id for e in self.entries]

    def cu_seqlens(self) -> list:
        """Cumulative query offsets, varlen-attention style (len = entries + 1)."""
        return [e.offset for e in self.entries] + [self.total_query_tokens]

    def __len__(self):
        return len(self.entries)


@dataclass
class SchedulerState:
    pool: KvPool
    mode: SchedMode = SchedMode.MULTIPLEXED
    waiting: list = field(default_factory=list)
    running: list = field(default_factory=list)
    finished: list = field(default_factory=list)
    finish_times: dict = field(default_factory=dict)
    admission_order: list = field(default_factory=list)

    def _wait_key(self, req: Request):
        return (req.arrival_time, req.id)


def _charge(req: Request, phase: Phase, cfg: ServeConfig, mode: SchedMode) -> int:
    if mode is SchedMode.STATIC:
        return req.total_len
    return query_tokens(req, phase, cfg)


def submit(state: SchedulerState, req: Request, cfg: ServeConfig) -> SchedulerState:
    if req.total_len > cfg.max_num_batched_tokens:
        raise Unschedulable(
            f"request {req.id}: {req.total_len} tokens exceed max_num_batched_tokens={cfg.max_num_batched_tokens}"
        )
    slots = kv_request_slots(req.total_len, cfg)
    if slots > state.pool.capacity_slots:
        raise Unschedulable(f"request {req.id}: needs {slots} KV slots, pool holds {state.pool.capacity_slots}")
    req = replace(req, phase=Phase.WAITING, kv_handle=None)
    keys = [state._wait_key(r) for r in state.waiting]
    state.waiting.insert(bisect.bisect_right(keys, state._wait_key(req)), req)
    return state


def build_step_batch(state: SchedulerState, cfg: ServeConfig) -> StepBatch:
    """Pack one iteration's work and admit waiting requests into the headroom.

    Running requests go first in admission order.  If their phases collide
    (several reach a Refresh together) the ones that no longer fit sit this
    iteration out.  Admission is strict head-of-line: it stops at the first
    waiting request that misses either the token budget or the pool.
    """
    budget = cfg.max_num_batched_tokens
    batch = StepBatch()
    for req in state.running:
        phase = phase_at_step(req, cfg)
        charged = _charge(req, phase, cfg, state.mode)
        if batch.total_charged_tokens + charged <= budget:
            batch.add(req, phase, cfg, charged)
        else:
            batch.deferred.append(req.id)

    while state.waiting:
        head = state.waiting[0]
        phase = phase_at_step(head, cfg)
        charged = _charge(head, phase, cfg, state.mode)
        slots = kv_request_slots(head.total_len, cfg)
        if batch.total_charged_tokens + charged > budget or not state.pool.can_alloc(slots):
            break
        state.waiting.pop(0)
        handle = kv_alloc(state.pool, head.id, slots)
        admitted = replace(head, phase=phase, kv_handle=handle)
        state.running.append(admitted)
        state.admission_order.append(head.id)
        batch.add(admitted, phase, cfg, charged, admitted=True)

    assert batch.total_query_tokens <= batch.total_charged_tokens <= budget
    return batch


def on_step_complete(state: SchedulerState, batch: StepBatch, cfg: ServeConfig,
                     now: Optional[float] = None) -> SchedulerState:
    stepped = set(batch.request_ids)
    still_running = []
    for req in state.running:
        if req.id not in stepped:
            still_running.append(req)
            continue
        nxt = advance(req, cfg)
        if nxt.phase is Phase.FINISHED:
            kv_free(state.pool, req.kv_handle)
            state.finished.append(nxt)
            state.finish_times[nxt.id] = now
        else:
            still_running.append(nxt)
    state.running = still_running
    return state


def new_state(capacity_slots: int, mode: SchedMode = SchedMode.MULTIPLEXED) -> SchedulerState:
    return SchedulerState(pool=KvPool(capacity_slots), mode=SchedMode(mode))
