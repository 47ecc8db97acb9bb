"""Head-centric sparse KV cache with float64 reference attention kernels.

Tensors use the token-major layout ``[tokens, heads, head_dim]``; the packed
cache is head-major ``[heads, k, head_dim]`` so each head's retained rows sit
contiguously and Reuse attention reads them without an index map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class PoolExhausted(RuntimeError):
    """Not enough free KV slots; the request has to keep waiting."""


def _as3d(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name} must be [tokens, heads, head_dim], got shape {a.shape}")
    return a


def _check_qk(q: np.ndarray, k: np.ndarray) -> None:
    if q.shape[1:] != k.shape[1:]:
        raise ValueError(f"head/dim mismatch: {q.shape} vs {k.shape}")


# -- scoring -----------------------------------------------------------------

def _raw_scores(q_b: np.ndarray, k: np.ndarray) -> np.ndarray:
    # [H, n_q, n_k] dot products, reduced over block queries by max
    dots = np.einsum("qhd,khd->hqk", q_b, k)
    return dots.max(axis=1)


def _window_max(raw: np.ndarray, w: int) -> np.ndarray:
    # Sliding max along the last axis; the window is clipped at both ends.
    half = w // 2
    if half == 0:
        return raw.copy()
    padded = np.pad(raw, [(0, 0)] * (raw.ndim - 1) + [(half, half)], constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, w, axis=-1)
    return windows.max(axis=-1)


def score_per_head(q_b, k, w: int) -> np.ndarray:
    """Pooled per-head importance ``S[h, j]`` of each context key."""
    q_b, k = _as3d(q_b, "Q_b"), _as3d(k, "K")
    _check_qk(q_b, k)
    if w < 1 or w % 2 == 0:
        raise ValueError("pooling window must be odd and >= 1")
    if k.shape[0] < 1:
        raise ValueError("need at least one context key")
    return _window_max(_raw_scores(q_b, k), w)


def score_global(q_b, k, w: int) -> np.ndarray:
    """Head-summed pooled score; one ranking shared by every head."""
    return _sum_heads(score_per_head(q_b, k, w))


def _sum_heads(per_head: np.ndarray) -> np.ndarray:
    total = np.zeros(per_head.shape[1])
    for h in range(per_head.shape[0]):
        total += per_head[h]
    return total


def select_topk(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending; ties favour the lower index.

    A ``[H, n]`` input gives a ``[H, k]`` result (one row per head), a ``[n]``
    input gives a single ``[k]`` set.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def broadcast_shared(indices, num_heads: int) -> np.ndarray:
    idx = np.asarray(indices)
    return np.broadcast_to(idx, (num_heads, idx.shape[-1])).copy()


# -- packing -----------------------------------------------------------------

@dataclass
class PackedKv:
    keys: np.ndarray  # [H, k, D]
    values: np.ndarray  # [H, k, D]
    handle: Optional["KvHandle"] = None

    @property
    def num_heads(self) -> int:
        return self.keys.shape[0]

    @property
    def k(self) -> int:
        return self.keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]

    @classmethod
    def empty(cls, num_heads: int, head_dim: int) -> "PackedKv":
        z = np.zeros((num_heads, 0, head_dim))
        return cls(z, z.copy())


def pack_kv(k, v, indices_per_head, handle=None) -> PackedKv:
    """Gather each head's selected rows into a contiguous ``[H, k, D]`` store."""
    k, v = _as3d(k, "K"), _as3d(v, "V")
    if k.shape != v.shape:
        raise ValueError(f"K/V shape mismatch: {k.shape} vs {v.shape}")
    n, num_heads, _ = k.shape
    idx = np.asarray(indices_per_head, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != num_heads:
        raise ValueError(f"expected one index list per head ({num_heads}), got shape {idx.shape}")
    if idx.size:
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError("index out of range")
        if np.any(np.diff(idx, axis=1) <= 0):
            raise ValueError("indices must be strictly ascending without duplicates")
    heads = np.arange(num_heads)[:, None]
    keys = np.ascontiguousarray(k[idx, heads])
    values = np.ascontiguousarray(v[idx, heads])
    return PackedKv(keys, values, handle)


# -- attention ---------------------------------------------------------------

def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def attention_probs(q, k, d: Optional[float] = None) -> np.ndarray:
    """Row-softmax attention weights ``[H, n_q, n_k]``."""
    q, k = _as3d(q, "Q"), _as3d(k, "K")
    _check_qk(q, k)
    d = q.shape[2] if d is None else d
    logits = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(d)
    return _softmax_rows(logits)


def attention_dense(q, k, v, d: Optional[float] = None) -> np.ndarray:
    q, k, v = _as3d(q, "Q"), _as3d(k, "K"), _as3d(v, "V")
    if k.shape != v.shape:
        raise ValueError(f"K/V shape mismatch: {k.shape} vs {v.shape}")
    p = attention_probs(q, k, d)
    return np.einsum("hqk,khd->qhd", p, v)


def attention_with_cache(q_b, k_b, v_b, cache: PackedKv, d: Optional[float] = None) -> np.ndarray:
    """Block attention over ``[block keys; packed cache]`` for every head."""
    q_b, k_b, v_b = _as3d(q_b, "Q_b"), _as3d(k_b, "K_b"), _as3d(v_b, "V_b")
    _check_qk(q_b, k_b)
    if cache.keys.shape[0] != q_b.shape[1] or cache.keys.shape[2] != q_b.shape[2]:
        raise ValueError(f"cache [H, k, D]={cache.keys.shape} does not match block heads/dim {q_b.shape[1:]}")
    d = q_b.shape[2] if d is None else d
    # head-major views of the block so the cache is appended without gathering
    keys = np.concatenate([k_b.transpose(1, 0, 2), cache.keys], axis=1)
    values = np.concatenate([v_b.transpose(1, 0, 2), cache.values], axis=1)
    logits = np.einsum("qhd,hkd->hqk", q_b, keys) / np.sqrt(d)
    p = _softmax_rows(logits)
    return np.einsum("hqk,hkd->qhd", p, values)


def attention_masked_dense(q_b, k_b, v_b, k_ctx, v_ctx, keep, d: Optional[float] = None) -> np.ndarray:
    """Dense attention over block + full context with dropped context keys masked to -inf.

    ``keep`` is a per-head list of retained context indices.  This never
    gathers, so it serves as an independent check of the packed path.
    """
    q_b = _as3d(q_b, "Q_b")
    keys = np.concatenate([_as3d(k_b, "K_b"), _as3d(k_ctx, "K_ctx")], axis=0)
    values = np.concatenate([_as3d(v_b, "V_b"), _as3d(v_ctx, "V_ctx")], axis=0)
    n_b, num_heads, dim = q_b.shape
    n_ctx = keys.shape[0] - n_b
    d = dim if d is None else d
    mask = np.full((num_heads, n_ctx), -np.inf)
    for h, idx in enumerate(keep):
        mask[h, np.asarray(idx, dtype=np.int64)] = 0.0
    full_mask = np.concatenate([np.zeros((num_heads, n_b)), mask], axis=1)
    logits = np.einsum("qhd,khd->hqk", q_b, keys) / np.sqrt(d) + full_mask[:, None, :]
    p = _softmax_rows(logits)
    return np.einsum("hqk,khd->qhd", p, values)


# -- pool --------------------------------------------------------------------

@dataclass(frozen=True)
class KvHandle:
    request_id: int
    slots: int


class KvPool:
    """Fixed-capacity pool counted in retained-token slots; all-or-nothing allocation."""

    def __init__(self, capacity_slots: int):
        if capacity_slots < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity_slots = int(capacity_slots)
        self.allocated: dict = {}

    @property
    def used(self) -> int:
        return sum(h.slots for h in self.allocated.values())

    @property
    def free(self) -> int:
        return self.capacity_slots - self.used

    def can_alloc(self, slots: int) -> bool:
        return slots <= self.free

    def alloc(self, request_id: int, slots: int) -> KvHandle:
        if slots < 0:
            raise ValueError("slots must be >= 0")
        if request_id in self.allocated:
            raise ValueError(f"request {request_id} already holds an allocation")
        if slots > self.free:
            raise PoolExhausted(f"need {slots} slots, {self.free} free of {self.capacity_slots}")
        handle = KvHandle(request_id, slots)
        self.allocated[request_id] = handle
        return handle

    def release(self, handle: KvHandle) -> None:
        if self.allocated.get(handle.request_id) != handle:
            raise ValueError(f"handle for request {handle.request_id} is not live")
        del self.allocated[handle.request_id]


def kv_alloc(pool: KvPool, request_id: int, slots: int) -> KvHandle:
    return pool.alloc(request_id, slots)


def kv_free(pool: KvPool, handle: KvHandle) -> None:
    pool.release(handle)


def select_for_heads(scores_per_head: np.ndarray, k: int, mode: str = "head") -> np.ndarray:
    """``[H, k]`` retained indices, per head (``"head"``) or shared (``"global"``)."""
    if mode == "head":
        return select_topk(scores_per_head, k)
    if mode == "global":
        return broadcast_shared(select_topk(_sum_heads(scores_per_head), k), scores_per_head.shape[0])
    raise ValueError(f"unknown selection mode {mode!r}")


def head_argmax_retained(scores_per_head: np.ndarray, indices: Sequence) -> list:
    """For each head, whether its single best-scoring key survived selection."""
    return [int(np.argmax(scores_per_head[h])) in set(np.asarray(indices[h]).tolist())
            for h in range(scores_per_head.shape[0])]
