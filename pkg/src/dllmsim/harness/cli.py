"""``dllm-sim`` command line: simulate, gen, verify, ablate, plan."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..core import ConfigError
from ..membudget import (CapacityError, kv_pool_capacity, memory_plan, profile_monolithic_activation,
                         profile_peak_activation)
from ..scheduler import SchedMode
from ..simexec import run_numeric_verify, run_sim
from .ablation import format_ablation_csv, run_ablation
from .config import load_config
from .metrics import write_events, write_metrics_csv
from .trace import TraceError, gen_burst, gen_poisson, read_trace, write_trace

log = logging.getLogger("dllmsim")

SEED_ENV = "DLLM_SIM_SEED"


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else args.seed


def cmd_simulate(args) -> int:
    cfg, cm = load_config(args.config)
    trace = read_trace(args.trace, cfg.block_size)
    res = run_sim(trace, cfg, cm, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.jsonl", res.events)
    report = {
        "mode": res.mode.value,
        "seed": _seed(args),
        "memory_plan": res.plan.as_dict(),
        "num_steps": res.num_steps,
        "rejected": [{"request_id": rid, "reason": why} for rid, why in res.rejected],
        "violations": [{"time": t, "what": what} for t, what in res.violations],
    }
    if res.metrics is not None:
        write_metrics_csv(out / "metrics.csv", res.events, res.metrics)
        report["summary"] = res.metrics.summary()
        s = report["summary"]
        print(f"{res.mode.value}: {s['num_finished']} finished, throughput {s['throughput_tok_s']:.2f} tok/s, "
              f"mean latency {s['latency_mean_s']:.3f} s, sigma {s['latency_std_s']:.3f} s, "
              f"tail span {s['tail_span_s']:.3f} s")
    else:
        print("no request finished")
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for rid, why in res.rejected:
        log.warning("rejected request %d: %s", rid, why)
    for t, what in res.violations:
        log.error("invariant violation at t=%.6f: %s", t, what)
    if args.strict and (res.rejected or res.violations):
        return 1
    return 0


def cmd_gen(args) -> int:
    seed = _seed(args)
    common = dict(prompt_mean=args.prompt_mean, prompt_spread=args.prompt_spread, gen_length=args.gen_length,
                  block_size=args.block_size, prompt_multiple=args.prompt_multiple)
    if args.kind == "poisson":
        records = gen_poisson(args.rate, args.n, seed=seed, **common)
    else:
        records = gen_burst(args.rate, args.burst_rate, args.burst_every, args.burst_len, args.n,
                            seed=seed, **common)
    write_trace(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_verify(args) -> int:
    base = _seed(args)
    worst = {"dense": 0.0, "head": 0.0, "global": 0.0}
    ok = True
    for s in range(base, base + args.seeds):
        rep = run_numeric_verify(s)
        for k in worst:
            worst[k] = max(worst[k], rep[f"max_rel_err_{k}"])
        ok &= rep["ok"]
    trap = rep["uniformity_trap"]
    print(f"seeds {base}..{base + args.seeds - 1}")
    print(f"dense (r=1) vs dense attention      max rel err {worst['dense']:.3e}  (limit 1e-12)")
    print(f"per-head packed vs masked dense     max rel err {worst['head']:.3e}  (limit 1e-10)")
    print(f"shared-mask packed vs masked dense  max rel err {worst['global']:.3e}")
    print(f"uniformity trap witness: per-head {trap['per_head_indices']} global {trap['global_indices']} "
          f"-> {'holds' if trap['holds'] else 'FAILS'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg, cm = load_config(args.config)
    trace = read_trace(args.trace, cfg.block_size)
    rows = run_ablation(trace, cfg, cm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(format_ablation_csv(rows), encoding="utf-8")
    for r in rows:
        print(f"{r['arm']:<22} {r['throughput_tok_s']:10.2f} tok/s  x{r['relative_throughput']:.3f}")
    return 0


def _plan_line(label: str, fn) -> dict:
    try:
        plan = fn()
    except CapacityError as exc:
        print(f"{label:<12} rejected: {exc}")
        return {"rejected": str(exc)}
    print(f"{label:<12} activation {plan.activation_budget_bytes:>14,d} B  "
          f"kv pool {plan.kv_pool_bytes:>14,d} B  slots {plan.kv_token_slots:>10,d}")
    return plan.as_dict()


def cmd_plan(args) -> int:
    cfg, _ = load_config(args.config)
    res = {
        "configured": _plan_line("configured", lambda: memory_plan(cfg)),
        "logit_aware": _plan_line("logit-aware", lambda: kv_pool_capacity(cfg, profile_peak_activation(cfg))),
        "monolithic": _plan_line("monolithic", lambda: kv_pool_capacity(
            cfg, profile_monolithic_activation(cfg, args.mono_batch, args.mono_len))),
    }
    if args.json:
        print(json.dumps(res, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dllm-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="replay a trace through the scheduler and cost model")
    s.add_argument("--trace", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", choices=[m.value for m in SchedMode], default=SchedMode.MULTIPLEXED.value)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strict", action="store_true", help="exit 1 on rejected requests or invariant violations")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gen", help="generate an arrival trace")
    g.add_argument("kind", choices=["poisson", "burst"])
    g.add_argument("--rate", type=float, required=True, help="(base) arrival rate, requests/s")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--burst-rate", type=float)
    g.add_argument("--burst-every", type=float, default=60.0)
    g.add_argument("--burst-len", type=float, default=10.0)
    g.add_argument("--prompt-mean", type=int, default=100)
    g.add_argument("--prompt-spread", type=int, default=0)
    g.add_argument("--prompt-multiple", type=int, default=1)
    g.add_argument("--gen-length", type=int, default=256)
    g.add_argument("--block-size", type=int, default=32)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("verify", help="numeric check of the sparse attention path")
    v.add_argument("--seeds", type=int, default=10)
    v.add_argument("--seed", type=int, default=0, help="first seed")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="run the incremental feature ablation")
    a.add_argument("--trace", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plan", help="print the memory plan")
    pl.add_argument("--config")
    pl.add_argument("--mono-batch", type=int, default=1, help="batch of the monolithic logit reservation")
    pl.add_argument("--mono-len", type=int, default=None,
                    help="sequence length of the monolithic reservation (default: max_num_batched_tokens)")
    pl.add_argument("--json", action="store_true")
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen" and args.kind == "burst" and args.burst_rate is None:
        print("gen burst needs --burst-rate", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
