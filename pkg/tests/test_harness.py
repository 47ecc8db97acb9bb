import json
import math
import random
from pathlib import Path

import numpy as np
import pytest

from dllmsim.core import ConfigError, GiB, ServeConfig
from dllmsim.harness.ablation import ARMS, run_ablation
from dllmsim.harness.cli import main
from dllmsim.harness.config import format_config, load_config, parse_config
from dllmsim.harness.metrics import Event, NoDataError, compute_metrics, read_events, write_events
from dllmsim.harness.trace import (TraceError, TraceRecord, format_trace, gen_burst, gen_poisson, in_burst,
                                   parse_trace, read_trace)
from dllmsim.simexec import CostModel

DATA = Path(__file__).resolve().parents[1] / "src" / "dllmsim" / "data"


def log_for(latencies, gen=256, start=0.0):
    events = []
    for i in range(len(latencies)):
        events.append(Event(start, "arrival", i, prompt_len=10, gen_length=gen))
    for i, lat in enumerate(latencies):
        events.append(Event(start + lat, "finish", i))
    return events


# -- traces --------------------------------------------------------------------

def test_poisson_mean_gap():
    trace = gen_poisson(0.5, 1000, seed=42)
    times = [r.arrival_time for r in trace]
    gaps = np.diff([0.0] + times)
    assert 1.8 <= gaps.mean() <= 2.2


def test_poisson_single_and_empty():
    one = gen_poisson(0.5, 1, seed=1)
    assert len(one) == 1 and one[0].arrival_time > 0
    assert one[0].arrival_time == np.random.default_rng(1).exponential(2.0)
    assert gen_poisson(1.0, 0) == []


def test_poisson_seeded():
    a = format_trace(gen_poisson(1.0, 50, prompt_spread=20, seed=3))
    assert a == format_trace(gen_poisson(1.0, 50, prompt_spread=20, seed=3))
    assert a != format_trace(gen_poisson(1.0, 50, prompt_spread=20, seed=4))


def test_poisson_lengths():
    trace = gen_poisson(1.0, 200, prompt_mean=100, prompt_spread=50, gen_length=250, block_size=32,
                        prompt_multiple=8, seed=0)
    assert all(r.gen_length == 256 for r in trace)
    assert all(r.prompt_len % 8 == 0 and 48 <= r.prompt_len <= 152 for r in trace)
    with pytest.raises(ValueError):
        gen_poisson(0, 5)


def test_burst_ratio():
    base, burst, every, length = 0.5, 5.0, 60.0, 15.0
    trace = gen_burst(base, burst, every, length, 10_000, seed=9)
    horizon = trace[-1].arrival_time
    n_periods = math.floor(horizon / every)
    cut = n_periods * every  # whole periods only
    in_b = sum(1 for r in trace if r.arrival_time < cut and in_burst(r.arrival_time, every, length))
    out_b = sum(1 for r in trace if r.arrival_time < cut and not in_burst(r.arrival_time, every, length))
    ratio = (in_b / (n_periods * length)) / (out_b / (n_periods * (every - length)))
    assert abs(ratio - burst / base) <= 0.2 * burst / base


def test_burst_degenerate_matches_poisson():
    trace = gen_burst(0.5, 0.5, 60.0, 15.0, 5000, seed=2)
    gaps = np.diff([0.0] + [r.arrival_time for r in trace])
    assert gaps.mean() == pytest.approx(2.0, rel=0.05)
    assert gaps.std() / gaps.mean() == pytest.approx(1.0, rel=0.05)  # exponential: cv = 1


def test_burst_edge_cases():
    assert gen_burst(1.0, 2.0, 10.0, 2.0, 0) == []
    with pytest.raises(ValueError):
        gen_burst(1.0, 2.0, 10.0, 10.0, 5)
    times = [r.arrival_time for r in gen_burst(1.0, 10.0, 10.0, 2.0, 500, seed=1)]
    assert times == sorted(times)


def test_trace_round_trip_bundled(data_dir):
    for path in sorted(data_dir.glob("*.csv")):
        text = path.read_text(encoding="utf-8")
        assert format_trace(parse_trace(text)) == text


def test_trace_round_trip_generated():
    text = format_trace(gen_poisson(3.0, 100, prompt_spread=30, seed=11))
    assert format_trace(parse_trace(text)) == text


def test_trace_parse_features_and_errors():
    text = "# synthetic\narrival_time, prompt_len, gen_length\n0.5,10,32\n# mid comment\n\n1.0,0,64\n"
    assert parse_trace(text, block_size=32) == [TraceRecord(0.5, 10, 32), TraceRecord(1.0, 0, 64)]
    for bad in ["0.5,10,32\n", HEADER_ONLY + "1.0,1,32\n0.5,1,32\n", HEADER_ONLY + "1.0,1\n",
                HEADER_ONLY + "-1,1,32\n", HEADER_ONLY + "x,1,32\n"]:
        with pytest.raises(TraceError):
            parse_trace(bad)
    with pytest.raises(TraceError):
        parse_trace(HEADER_ONLY + "1.0,1,48\n", block_size=32)


HEADER_ONLY = "arrival_time,prompt_len,gen_length\n"


# -- metrics -------------------------------------------------------------------

def test_metrics_equal_latencies():
    m = compute_metrics(log_for([2, 2, 2]))
    assert (m.latency_mean, m.latency_std, m.tail_span) == (2, 0, 0)


def test_metrics_two_latencies():
    m = compute_metrics(log_for([1, 3]))
    vals = [1, 3]
    mean = sum(vals) / len(vals)
    sigma = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
    assert (m.latency_mean, m.latency_std, m.tail_span) == (mean, sigma, 2) == (2, 1, 2)


def test_metrics_throughput_definition():
    m = compute_metrics(log_for([10.0], gen=256))
    assert m.throughput == pytest.approx(25.6)
    assert m.makespan == 10.0 and m.gen_tokens == 256


def test_metrics_no_data():
    with pytest.raises(NoDataError):
        compute_metrics([])
    with pytest.raises(NoDataError):
        compute_metrics([Event(0.0, "arrival", 0, gen_length=32)])


def test_metrics_permutation_invariant():
    rnd = random.Random(0)
    events = []
    for i in range(40):
        t = rnd.uniform(0, 50)
        events.append(Event(t, "arrival", i, prompt_len=5, gen_length=rnd.choice([32, 64])))
        events.append(Event(t + rnd.uniform(1, 9), "finish", i))
    base = compute_metrics(events).summary()
    for _ in range(5):
        rnd.shuffle(events)
        assert compute_metrics(events).summary() == base


def test_event_log_round_trip(tmp_path):
    events = [Event(0.25, "step", None, step=3, query_tokens=40, logit_chunks=[32, 8], step_time=0.1),
              Event(0.35, "exec", 1, step=0, phase="refresh", query_tokens=40, kv_read_bytes=0)]
    write_events(tmp_path / "e.jsonl", events)
    assert read_events(tmp_path / "e.jsonl") == events
    first = json.loads((tmp_path / "e.jsonl").read_text().splitlines()[0])
    assert list(first)[:8] == ["time", "event_kind", "request_id", "step", "phase", "query_tokens",
                               "logit_chunks", "step_time"]


# -- config --------------------------------------------------------------------

def test_bundled_configs(data_dir):
    cfg, cm = load_config(data_dir / "rtx4090.cfg")
    assert cfg == ServeConfig() and cm == CostModel()
    l40s, _ = load_config(data_dir / "l40s.cfg")
    assert l40s.hw.hbm_bytes == 48 * GiB


def test_config_round_trip():
    cfg = ServeConfig(refresh_interval=4, logit_decomposition=False)
    cm = CostModel(c_attn=32.0)
    assert parse_config(format_config(cfg, cm)) == (cfg, cm)


def test_config_units_and_errors():
    cfg, _ = parse_config("hbm_bytes = 40 GB\nweights_bytes = 16 GiB\nrefresh_interval = inf\n")
    assert cfg.hw.hbm_bytes == 40 * 10**9 and cfg.hw.weights_bytes == 16 * GiB
    assert cfg.refresh_interval is None
    for bad in ["bogus = 1", "block_size", "logit_decomposition = maybe", "block_size = 0",
                "fixed_step_overhead = 0"]:
        with pytest.raises(ConfigError):
            parse_config(bad)


# -- ablation ------------------------------------------------------------------

@pytest.fixture(scope="module")
def saturating():
    return read_trace(DATA / "saturating_poisson.csv", 32)[:80]


def test_ablation_self_comparison(saturating):
    rows = run_ablation(saturating, ServeConfig(), arms=(ARMS[0], ARMS[0]))
    assert [r["relative_throughput"] for r in rows] == [1.0, 1.0]


def test_ablation_arms(saturating):
    rows = run_ablation(saturating, ServeConfig(), parallel=True)
    assert [r["arm"] for r in rows] == [a.name for a in ARMS]
    assert rows[0]["relative_throughput"] == 1.0
    assert rows[1]["relative_throughput"] > 1.0
    assert rows[3]["reuse_bytes"] * 2 == rows[2]["reuse_bytes"]
    assert rows[3]["retention_ratio"] == 0.5 and rows[2]["retention_ratio"] == 1.0
    serial = run_ablation(saturating, ServeConfig())
    assert serial == rows


# -- CLI -----------------------------------------------------------------------

def test_cli_gen_and_simulate(tmp_path, data_dir, capsys):
    trace = tmp_path / "t.csv"
    assert main(["gen", "poisson", "--rate", "2", "--n", "10", "--prompt-spread", "20", "--out", str(trace),
                 "--seed", "5"]) == 0
    assert len(read_trace(trace)) == 10
    out = tmp_path / "run"
    assert main(["simulate", "--trace", str(trace), "--config", str(data_dir / "rtx4090.cfg"),
                 "--out", str(out), "--strict"]) == 0
    assert {p.name for p in out.iterdir()} == {"events.jsonl", "metrics.csv", "report.json"}
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["num_finished"] == 10 and report["violations"] == []
    csv = (out / "metrics.csv").read_text()
    assert csv.startswith("request_id,arrival_time,finish_time,latency_s") and "# summary" in csv


def test_cli_gen_burst(tmp_path):
    trace = tmp_path / "b.csv"
    assert main(["gen", "burst", "--rate", "0.5", "--burst-rate", "4", "--n", "30", "--out", str(trace)]) == 0
    assert len(read_trace(trace)) == 30
    assert main(["gen", "burst", "--rate", "0.5", "--out", str(trace)]) == 2


def test_cli_strict_exit(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text(HEADER_ONLY + "0.0,10,32\n0.0,5000,32\n")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("gen_length = 32\nnum_steps = 4\n")
    args = ["simulate", "--trace", str(trace), "--config", str(cfg), "--out", str(tmp_path / "o")]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 1
    trace.write_text(HEADER_ONLY + "0.0,10,32\n")
    assert main(args + ["--strict"]) == 0


def test_cli_bad_inputs(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 3\n")
    assert main(["plan", "--config", str(cfg)]) == 2
    assert main(["simulate", "--trace", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_seed_env(tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("DLLM_SIM_SEED", "17")
    main(["gen", "poisson", "--rate", "1", "--n", "5", "--out", str(a), "--seed", "1"])
    monkeypatch.delenv("DLLM_SIM_SEED")
    main(["gen", "poisson", "--rate", "1", "--n", "5", "--out", str(b), "--seed", "17"])
    assert a.read_bytes() == b.read_bytes()


def test_cli_verify_and_plan(data_dir, capsys):
    assert main(["verify", "--seeds", "3"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["plan", "--config", str(data_dir / "l40s.cfg"), "--mono-batch", "16", "--mono-len", "2048",
                 "--json"]) == 0
    text = capsys.readouterr().out
    res = json.loads(text[text.index("{"):])
    assert res["logit_aware"]["kv_token_slots"] > res["monolithic"]["kv_token_slots"]


def test_cli_ablate(tmp_path, data_dir):
    trace = tmp_path / "t.csv"
    trace.write_text(format_trace(read_trace(data_dir / "saturating_poisson.csv")[:20]))
    assert main(["ablate", "--trace", str(trace), "--out", str(tmp_path / "ab")]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("arm,mode,")
