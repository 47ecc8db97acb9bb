"""Incremental feature ablation: static baseline, then scheduler, logits, sparsity."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from ..core import ServeConfig
from ..scheduler import SchedMode
from ..simexec import CostModel, SimResult, run_sim


@dataclass(frozen=True)
class Arm:
    name: str
    mode: SchedMode
    logit_decomposition: bool
    head_sparsity: bool


ARMS = (
    Arm("baseline", SchedMode.STATIC, False, False),
    Arm("+phase_multiplexing", SchedMode.MULTIPLEXED, False, False),
    Arm("+logit_decomposition", SchedMode.MULTIPLEXED, True, False),
    Arm("+head_sparsity", SchedMode.MULTIPLEXED, True, True),
)


def arm_config(arm: Arm, cfg: ServeConfig) -> ServeConfig:
    return cfg.with_(logit_decomposition=arm.logit_decomposition,
                     retention_ratio=cfg.retention_ratio if arm.head_sparsity else 1.0)


def run_arm(arm: Arm, trace: list, cfg: ServeConfig, cm: CostModel) -> SimResult:
    return run_sim(trace, arm_config(arm, cfg), cm, mode=arm.mode)


def run_ablation(trace: list, cfg: ServeConfig, cm: Optional[CostModel] = None,
                 arms=ARMS, parallel: bool = False) -> list:
    """Throughput of each arm relative to the first one.

    Arms share nothing mutable, so ``parallel=True`` just fans them out.
    """
    cm = cm or CostModel()
    if parallel:
        with ThreadPoolExecutor() as ex:
            results = list(ex.map(lambda a: run_arm(a, trace, cfg, cm), arms))
    else:
        results = [run_arm(a, trace, cfg, cm) for a in arms]
    base = results[0].metrics.throughput
    rows = []
    for arm, res in zip(arms, results):
        m = res.metrics
        rows.append({
            "arm": arm.name,
            "mode": arm.mode.value,
            "logit_decomposition": arm.logit_decomposition,
            "retention_ratio": arm_config(arm, cfg).retention_ratio,
            "kv_token_slots": res.plan.kv_token_slots,
            "throughput_tok_s": m.throughput,
            "relative_throughput": m.throughput / base,
            "latency_mean_s": m.latency_mean,
            "tail_span_s": m.tail_span,
            "reuse_bytes": res.reuse_bytes_total(),
            "num_steps": res.num_steps,
        })
    return rows


def format_ablation_csv(rows: list) -> str:
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"
