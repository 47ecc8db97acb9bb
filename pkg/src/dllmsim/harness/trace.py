"""Arrival traces: a plain CSV format plus Poisson and bursty generators."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

HEADER = "arrival_time,prompt_len,gen_length"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_time: float
    prompt_len: int
    gen_length: int

    def __post_init__(self):
        if self.arrival_time < 0 or self.prompt_len < 0 or self.gen_length < 0:
            raise TraceError(f"negative field in {self}")


def parse_trace(text: str, block_size: int = None) -> list:
    records = []
    seen_header = False
    for lineno, raw in enumerate(io.StringIO(text), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not seen_header:
            if line.replace(" ", "") != HEADER:
                raise TraceError(f"line {lineno}: expected header {HEADER!r}, got {line!r}")
            seen_header = True
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise TraceError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            rec = TraceRecord(float(parts[0]), int(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if records and rec.arrival_time < records[-1].arrival_time:
            raise TraceError(f"line {lineno}: arrival times must be nondecreasing")
        if block_size is not None and (rec.gen_length < 1 or rec.gen_length % block_size):
            raise TraceError(f"line {lineno}: gen_length {rec.gen_length} is not a multiple of block_size {block_size}")
        records.append(rec)
    if not seen_header:
        raise TraceError("missing header line")
    return records


def format_trace(records: Iterable[TraceRecord]) -> str:
    lines = [HEADER]
    for r in records:
        lines.append(f"{float(r.arrival_time)!r},{int(r.prompt_len)},{int(r.gen_length)}")
    return "\n".join(lines) + "\n"


def read_trace(path: Union[str, Path], block_size: int = None) -> list:
    return parse_trace(Path(path).read_text(encoding="utf-8"), block_size)


def write_trace(path: Union[str, Path], records: Iterable[TraceRecord]) -> None:
    Path(path).write_text(format_trace(records), encoding="utf-8")


def _lengths(rng: np.random.Generator, n: int, prompt_mean: int, prompt_spread: int,
             gen_length: int, block_size: int, prompt_multiple: int):
    lo = max(0, prompt_mean - prompt_spread)
    prompts = rng.integers(lo, prompt_mean + prompt_spread + 1, size=n)
    if prompt_multiple > 1:
        prompts = np.maximum(prompt_multiple, np.rint(prompts / prompt_multiple) * prompt_multiple)
    gen = max(block_size, int(round(gen_length / block_size)) * block_size)
    return [int(p) for p in prompts], gen


def gen_poisson(rate: float, n: int, prompt_mean: int = 100, prompt_spread: int = 0,
                gen_length: int = 256, block_size: int = 32, seed: int = 0,
                prompt_multiple: int = 1) -> list:
    """Poisson arrivals at ``rate`` requests/s with uniformly spread prompt lengths."""
    if rate <= 0:
        raise ValueError("rate must be > 0")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate, size=n)
    times = np.cumsum(gaps)
    prompts, gen = _lengths(rng, n, prompt_mean, prompt_spread, gen_length, block_size, prompt_multiple)
    return [TraceRecord(float(t), p, gen) for t, p in zip(times, prompts)]


def in_burst(t: float, burst_every: float, burst_len: float) -> bool:
    """Bursts occupy the last ``burst_len`` seconds of every ``burst_every`` period."""
    return (t % burst_every) >= burst_every - burst_len


def gen_burst(base_rate: float, burst_rate: float, burst_every: float, burst_len: float, n: int,
              seed: int = 0, prompt_mean: int = 100, prompt_spread: int = 0, gen_length: int = 256,
              block_size: int = 32, prompt_multiple: int = 1) -> list:
    """Piecewise-constant-rate Poisson arrivals alternating base and burst windows."""
    if base_rate <= 0 or burst_rate <= 0:
        raise ValueError("rates must be > 0")
    if not 0 < burst_len < burst_every:
        raise ValueError("need 0 < burst_len < burst_every")
    rng = np.random.default_rng(seed)
    times = []
    t = 0.0
    period, bursting = 0, False
    while len(times) < n:
        work = rng.exponential(1.0)  # unit-rate clock, spent across rate segments
        while True:
            if bursting:
                rate, seg_end = burst_rate, (period + 1) * burst_every
            else:
                rate, seg_end = base_rate, (period + 1) * burst_every - burst_len
            if t + work / rate < seg_end:
                t += work / rate
                break
            work -= (seg_end - t) * rate
            t = seg_end
            if bursting:
                period += 1
            bursting = not bursting
        times.append(t)
    prompts, gen = _lengths(rng, n, prompt_mean, prompt_spread, gen_length, block_size, prompt_multiple)
    return [TraceRecord(float(t), p, gen) for t, p in zip(times, prompts)]
