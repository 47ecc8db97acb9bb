"""Configuration, request state and the per-request denoising lifecycle.

A request denoises its generated region block by block.  Each block takes a
fixed number of steps; the first step of a block (and optionally every
``refresh_interval``-th step after it) is a Refresh step that recomputes the
full sequence, the rest are Reuse steps that only touch the active block.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

GiB = 1 << 30


class Phase(str, enum.Enum):
    WAITING = "waiting"
    REFRESH = "refresh"
    REUSE = "reuse"
    FINISHED = "finished"


class ConfigError(ValueError):
    pass


def exact_fraction(x: float) -> Fraction:
    """Exact rational for a user-facing decimal (0.1 -> 1/10, not the binary float)."""
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return Fraction(repr(float(x)))


def retained_tokens(n: int, ratio: float) -> int:
    """ceil(ratio * n), at least 1 whenever n >= 1."""
    if n <= 0:
        return 0
    return max(1, math.ceil(exact_fraction(ratio) * n))


@dataclass(frozen=True)
class HardwareProfile:
    hbm_bytes: int = 24 * GiB
    weights_bytes: int = 17 * GiB
    compute_rate: float = 165e12  # FLOP/s
    mem_bandwidth: float = 1.008e12  # bytes/s
    guard_band_fraction: float = 0.05

    def __post_init__(self):
        if self.hbm_bytes <= self.weights_bytes:
            raise ConfigError("hbm_bytes must exceed weights_bytes")
        if self.weights_bytes < 0:
            raise ConfigError("weights_bytes must be >= 0")
        if self.compute_rate <= 0 or self.mem_bandwidth <= 0:
            raise ConfigError("compute_rate and mem_bandwidth must be > 0")
        if self.guard_band_fraction < 0:
            raise ConfigError("guard_band_fraction must be >= 0")


# Server-class card with the same model resident.
L40S_PROFILE = HardwareProfile(hbm_bytes=48 * GiB, compute_rate=362e12, mem_bandwidth=0.864e12)


@dataclass(frozen=True)
class ServeConfig:
    """Serving tunables plus the hardware profile they are budgeted against.

    Model dimensions default to an 8B-class masked diffusion model; the
    analytic memory model and cost model only do arithmetic on them.
    """

    max_num_batched_tokens: int = 4000
    max_num_logits: int = 2048
    gen_length: int = 256
    num_steps: int = 256
    block_size: int = 32
    refresh_interval: Optional[int] = None  # None: refresh only at block entry
    retention_ratio: float = 0.5
    pool_kernel: int = 3
    vocab_size: int = 126_464
    num_heads: int = 32
    head_dim: int = 128
    hidden_dim: int = 4096
    num_layers: int = 32
    bytes_per_element: int = 2
    workspace_coeff: float = 8
    logit_decomposition: bool = True
    hw: HardwareProfile = field(default_factory=HardwareProfile)

    def __post_init__(self):
        if self.max_num_logits < 1:
            raise ConfigError("max_num_logits must be >= 1")
        if self.max_num_batched_tokens < 1:
            raise ConfigError("max_num_batched_tokens must be >= 1")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not 0 < self.retention_ratio <= 1:
            raise ConfigError("retention_ratio must be in (0, 1]")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError("pool_kernel must be an odd integer >= 1")
        if self.gen_length < 1 or self.gen_length % self.block_size:
            raise ConfigError(
                f"gen_length {self.gen_length} is not a positive multiple of block_size {self.block_size}"
            )
        if self.num_steps < 1 or (self.num_steps * self.block_size) % self.gen_length:
            raise ConfigError("num_steps must give a whole number of steps per block")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1 or None")
        for name in ("vocab_size", "num_heads", "head_dim", "hidden_dim", "num_layers", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.workspace_coeff < 0:
            raise ConfigError("workspace_coeff must be >= 0")

    @property
    def steps_per_block(self) -> int:
        return self.num_steps * self.block_size // self.gen_length

    def with_(self, **changes) -> "ServeConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class DenoiseSchedule:
    steps_per_block: int
    num_blocks: int
    refresh_interval: Optional[int] = None

    @classmethod
    def for_request(cls, gen_length: int, cfg: ServeConfig) -> "DenoiseSchedule":
        if gen_length < 1 or gen_length % cfg.block_size:
            raise ConfigError(f"gen_length {gen_length} is not a multiple of block_size {cfg.block_size}")
        return cls(cfg.steps_per_block, gen_length // cfg.block_size, cfg.refresh_interval)

    @property
    def num_steps(self) -> int:
        return self.steps_per_block * self.num_blocks

    def is_refresh(self, step: int) -> bool:
        offset = step % self.steps_per_block
        if offset == 0:
            return True
        return self.refresh_interval is not None and offset % self.refresh_interval == 0

    @property
    def refresh_steps(self) -> frozenset:
        return frozenset(s for s in range(self.num_steps) if self.is_refresh(s))

    def timesteps(self) -> list:
        """Diffusion time for each step, running from 1 down towards 0."""
        n = self.num_steps
        return [1.0 - s / n for s in range(n)]


@dataclass(frozen=True)
class Request:
    id: int
    prompt_len: int
    gen_length: int
    arrival_time: float = 0.0
    step: int = 0
    block_index: int = 0
    phase: Phase = Phase.WAITING
    kv_handle: object = None

    def __post_init__(self):
        if self.prompt_len < 0 or self.gen_length < 1:
            raise ValueError("prompt_len must be >= 0 and gen_length >= 1")

    @property
    def total_len(self) -> int:
        return self.prompt_len + self.gen_length


def num_steps_for(req: Request, cfg: ServeConfig) -> int:
    return DenoiseSchedule.for_request(req.gen_length, cfg).num_steps


def phase_at_step(req: Request, cfg: ServeConfig) -> Phase:
    if req.phase is Phase.FINISHED:
        raise ValueError(f"request {req.id} is finished")
    sched = DenoiseSchedule.for_request(req.gen_length, cfg)
    return Phase.REFRESH if sched.is_refresh(req.step) else Phase.REUSE


def query_tokens(req: Request, phase: Phase, cfg: ServeConfig) -> int:
    if phase is Phase.REFRESH:
        return req.total_len
    if phase is Phase.REUSE:
        return cfg.block_size
    raise ValueError(f"no query tokens in phase {phase.value}")


def logit_tokens(req: Request, phase: Phase, cfg: ServeConfig) -> int:
    if phase not in (Phase.REFRESH, Phase.REUSE):
        raise ValueError(f"no logit tokens in phase {phase.value}")
    return cfg.block_size


def advance(req: Request, cfg: ServeConfig) -> Request:
    """Move a running request forward one denoising step.

    The finished request comes back without its KV handle; the caller is
    responsible for releasing it.
    """
    if req.phase not in (Phase.REFRESH, Phase.REUSE):
        raise ValueError(f"cannot advance request {req.id} in phase {req.phase.value}")
    sched = DenoiseSchedule.for_request(req.gen_length, cfg)
    step = req.step + 1
    block_index = step // sched.steps_per_block
    if step >= sched.num_steps:
        return replace(req, step=sched.num_steps, block_index=sched.num_blocks,
                       phase=Phase.FINISHED, kv_handle=None)
    phase = Phase.REFRESH if sched.is_refresh(step) else Phase.REUSE
    return replace(req, step=step, block_index=block_index, phase=phase)
