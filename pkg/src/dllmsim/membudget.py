"""Analytic memory model: logit sizing, chunked decoding and KV pool sizing.

All byte arithmetic is on Python ints.  Results that would not fit a signed
64-bit byte counter are rejected rather than silently carried around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .core import ServeConfig, exact_fraction, retained_tokens

MAX_BYTES = (1 << 63) - 1


class CapacityError(ValueError):
    """The configuration leaves no (or negative) room for the KV pool."""


@dataclass(frozen=True)
class MemoryPlan:
    hbm_bytes: int
    weights_bytes: int
    activation_budget_bytes: int
    kv_pool_bytes: int
    kv_token_slots: int
    bytes_per_retained_token: int
    logit_chunk_plan: tuple = ()

    def __post_init__(self):
        assert self.activation_budget_bytes + self.kv_pool_bytes + self.weights_bytes <= self.hbm_bytes

    def as_dict(self) -> dict:
        return {
            "hbm_bytes": self.hbm_bytes,
            "weights_bytes": self.weights_bytes,
            "activation_budget_bytes": self.activation_budget_bytes,
            "kv_pool_bytes": self.kv_pool_bytes,
            "kv_token_slots": self.kv_token_slots,
            "bytes_per_retained_token": self.bytes_per_retained_token,
            "logit_chunk_plan": list(self.logit_chunk_plan),
        }


def _check_bytes(n: int, what: str) -> int:
    if n > MAX_BYTES:
        raise OverflowError(f"{what} = {n} bytes exceeds the 64-bit byte range")
    return n


def logit_tensor_bytes(batch: int, seq_len: int, vocab: int, elem_bytes: int) -> int:
    for name, v in (("batch", batch), ("seq_len", seq_len), ("vocab", vocab), ("elem_bytes", elem_bytes)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return _check_bytes(int(batch) * int(seq_len) * int(vocab) * int(elem_bytes), "logit tensor")


def plan_logit_chunks(n_logit: int, max_num_logits: int) -> list:
    if n_logit < 0:
        raise ValueError("n_logit must be >= 0")
    if max_num_logits < 1:
        raise ValueError("max_num_logits must be >= 1")
    full, rem = divmod(n_logit, max_num_logits)
    return [max_num_logits] * full + ([rem] if rem else [])


class ResidentLogits:
    """High-water-mark probe for logit rows held at once."""

    def __init__(self):
        self.resident = 0
        self.high_water = 0

    def acquire(self, rows: int) -> None:
        self.resident += rows
        self.high_water = max(self.high_water, self.resident)

    def release(self, rows: int) -> None:
        self.resident -= rows
        assert self.resident >= 0


def chunked_decode(
    logits_provider: Callable[[int, int], np.ndarray],
    plan: Iterable[int],
    probe: Optional[ResidentLogits] = None,
) -> np.ndarray:
    """Argmax-decode logits one chunk at a time.

    ``logits_provider(start, rows)`` returns the ``[rows, V]`` logits for
    token rows ``start .. start + rows``.  Each chunk is dropped before the
    next one is requested.  Ties go to the lowest vocabulary index.
    """
    probe = probe if probe is not None else ResidentLogits()
    out = []
    start = 0
    for rows in plan:
        chunk = np.asarray(logits_provider(start, rows))
        if chunk.ndim != 2 or chunk.shape[0] != rows:
            raise ValueError(f"provider returned shape {chunk.shape} for a chunk of {rows} rows")
        probe.acquire(rows)
        out.append(np.argmax(chunk, axis=1))
        del chunk
        probe.release(rows)
        start += rows
    if not out:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def workspace_bytes(tokens: int, cfg: ServeConfig) -> int:
    """Attention/MLP scratch for ``tokens`` query tokens (linear model)."""
    raw = exact_fraction(cfg.workspace_coeff) * tokens * cfg.hidden_dim * cfg.bytes_per_element
    return math.ceil(raw)


def _with_guard_band(raw: int, cfg: ServeConfig) -> int:
    return _check_bytes(math.ceil(raw * (1 + exact_fraction(cfg.hw.guard_band_fraction))), "activation budget")


def profile_peak_activation(cfg: ServeConfig) -> int:
    """Activation reservation when logits are capped at ``max_num_logits`` rows."""
    logits = logit_tensor_bytes(1, cfg.max_num_logits, cfg.vocab_size, cfg.bytes_per_element)
    return _with_guard_band(workspace_bytes(cfg.max_num_batched_tokens, cfg) + logits, cfg)


def profile_monolithic_activation(cfg: ServeConfig, batch: int = 1, seq_len: Optional[int] = None) -> int:
    """Activation reservation that materializes the whole ``[batch, seq_len, V]`` logit tensor.

    Defaults to one row per schedulable query token.
    """
    seq_len = cfg.max_num_batched_tokens if seq_len is None else seq_len
    logits = logit_tensor_bytes(batch, seq_len, cfg.vocab_size, cfg.bytes_per_element)
    return _with_guard_band(workspace_bytes(cfg.max_num_batched_tokens, cfg) + logits, cfg)


def bytes_per_retained_token(cfg: ServeConfig) -> int:
    # key + value, every layer
    return 2 * cfg.num_heads * cfg.head_dim * cfg.bytes_per_element * cfg.num_layers


def worst_case_logit_tokens(cfg: ServeConfig) -> int:
    return (cfg.max_num_batched_tokens // cfg.block_size) * cfg.block_size


def kv_pool_capacity(cfg: ServeConfig, activation_budget: int) -> MemoryPlan:
    hw = cfg.hw
    pool = hw.hbm_bytes - hw.weights_bytes - activation_budget
    if pool < 0:
        raise CapacityError(
            f"activation budget {activation_budget} B plus weights {hw.weights_bytes} B "
            f"exceed HBM {hw.hbm_bytes} B by {-pool} B"
        )
    per_token = bytes_per_retained_token(cfg)
    n_logit = worst_case_logit_tokens(cfg)
    chunk_cap = cfg.max_num_logits if cfg.logit_decomposition else max(n_logit, 1)
    return MemoryPlan(
        hbm_bytes=hw.hbm_bytes,
        weights_bytes=hw.weights_bytes,
        activation_budget_bytes=activation_budget,
        kv_pool_bytes=pool,
        kv_token_slots=pool // per_token,
        bytes_per_retained_token=per_token,
        logit_chunk_plan=tuple(plan_logit_chunks(n_logit, chunk_cap)),
    )


def memory_plan(cfg: ServeConfig) -> MemoryPlan:
    """Profile activations the way ``cfg`` executes them, then size the pool."""
    if cfg.logit_decomposition:
        return kv_pool_capacity(cfg, profile_peak_activation(cfg))
    return kv_pool_capacity(cfg, profile_monolithic_activation(cfg))


def kv_request_slots(total_len: int, cfg: ServeConfig) -> int:
    if total_len < 1:
        raise ValueError("total_len must be >= 1")
    return retained_tokens(total_len, cfg.retention_ratio)


def kv_request_footprint(total_len: int, cfg: ServeConfig) -> int:
    return _check_bytes(kv_request_slots(total_len, cfg) * bytes_per_retained_token(cfg), "request KV footprint")
