"""Event log records, latency/throughput metrics and their file formats."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

EVENT_FIELDS = ("time", "event_kind", "request_id", "step", "phase", "query_tokens",
                "logit_chunks", "step_time", "kv_read_bytes", "prompt_len", "gen_length")


class NoDataError(ValueError):
    """The event log holds no finished request to measure."""


@dataclass
class Event:
    time: float
    event_kind: str  # arrival | reject | admit | exec | step | finish | defer
    request_id: Optional[int] = None
    step: Optional[int] = None
    phase: Optional[str] = None
    query_tokens: Optional[int] = None
    logit_chunks: Optional[list] = None
    step_time: Optional[float] = None
    kv_read_bytes: Optional[int] = None
    prompt_len: Optional[int] = None
    gen_length: Optional[int] = None

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in EVENT_FIELDS}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Event":
        return cls(**json.loads(line))


def write_events(path: Union[str, Path], events: Iterable[Event]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ev in events:
            f.write(ev.to_json() + "\n")


def read_events(path: Union[str, Path]) -> list:
    with open(path, encoding="utf-8") as f:
        return [Event.from_json(line) for line in f if line.strip()]


@dataclass
class SimMetrics:
    latencies: dict  # request id -> seconds
    gen_tokens: int
    makespan: float
    throughput: float
    latency_mean: float
    latency_std: float  # population
    tail_span: float
    num_rejected: int = 0
    utilization: list = field(default_factory=list)

    @property
    def num_finished(self) -> int:
        return len(self.latencies)

    def summary(self) -> dict:
        return {
            "num_finished": self.num_finished,
            "num_rejected": self.num_rejected,
            "gen_tokens": self.gen_tokens,
            "makespan_s": self.makespan,
            "throughput_tok_s": self.throughput,
            "latency_mean_s": self.latency_mean,
            "latency_std_s": self.latency_std,
            "tail_span_s": self.tail_span,
            "mean_utilization": statistics.fmean(self.utilization) if self.utilization else 0.0,
        }


def compute_metrics(events: Iterable[Event], max_num_batched_tokens: Optional[int] = None) -> SimMetrics:
    arrivals, gen, finishes = {}, {}, {}
    rejected = 0
    utilization = []
    for ev in events:
        if ev.event_kind == "arrival":
            arrivals[ev.request_id] = ev.time
            gen[ev.request_id] = ev.gen_length
        elif ev.event_kind == "finish":
            finishes[ev.request_id] = ev.time
        elif ev.event_kind == "reject":
            rejected += 1
        elif ev.event_kind == "step" and max_num_batched_tokens:
            utilization.append(ev.query_tokens / max_num_batched_tokens)
    if not finishes:
        raise NoDataError("no finished requests in the event log")
    missing = set(finishes) - set(arrivals)
    if missing:
        raise ValueError(f"finish without arrival for requests {sorted(missing)}")

    ids = sorted(finishes)
    lat = {i: finishes[i] - arrivals[i] for i in ids}
    values = [lat[i] for i in ids]
    tokens = sum(gen[i] for i in ids)
    makespan = max(finishes.values()) - min(arrivals[i] for i in ids)
    return SimMetrics(
        latencies=lat,
        gen_tokens=tokens,
        makespan=makespan,
        throughput=tokens / makespan if makespan > 0 else math.inf,
        latency_mean=statistics.fmean(values),
        latency_std=statistics.pstdev(values),
        tail_span=max(values) - min(values),
        num_rejected=rejected,
        utilization=utilization,
    )


def write_metrics_csv(path: Union[str, Path], events: list, metrics: SimMetrics) -> None:
    arrivals = {e.request_id: e for e in events if e.event_kind == "arrival"}
    finishes = {e.request_id: e.time for e in events if e.event_kind == "finish"}
    lines = ["request_id,arrival_time,finish_time,latency_s,prompt_len,gen_length"]
    for rid in sorted(metrics.latencies):
        a = arrivals[rid]
        lat = metrics.latencies[rid]
        lines.append(f"{rid},{a.time!r},{finishes[rid]!r},{lat!r},{a.prompt_len},{a.gen_length}")
    lines.append("")
    lines.append("# summary")
    lines.append("metric,value")
    for key, value in metrics.summary().items():
        lines.append(f"{key},{value!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
