"""End-to-end acceptance checks, one test per criterion.

Each test records its own wall time and fails if it overruns its budget. The
summary at the end of the pytest run prints one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import random
import time

import numpy as np
import pytest

from conftest import SMALL, hosts_of, random_requests, serial_replay_case
from dpswitch.comms import UnknownGroup, build_pool, enumerate_tp_groups, get_group
from dpswitch.core import LLAMA_70B, DeploymentConfig, Mode, Priority, Request, ms_to_us
from dpswitch.costmodel import CostModel
from dpswitch.kvcache import (KVCacheAdaptor, OutOfBlocks, RemapPolicy, adapt_block_size,
                              max_context)
from dpswitch.metrics import summarize
from dpswitch.scheduler import LoadAdaptive, ModeFromRequest, StaticMode, Strategy
from dpswitch.simulator import SimConfig, run_simulation
from dpswitch.weights import (ToyDims, dense_forward_toy, load_weights, switch_weight_mode,
                              tp_forward_toy)
from dpswitch.workload import WorkloadSpec, generate_trace

L_US = ms_to_us(15.0)


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds
        self.t0 = time.perf_counter()

    def check(self) -> None:
        took = time.perf_counter() - self.t0
        assert took < self.seconds, f"took {took:.1f}s, budget {self.seconds}s"


def test_c01_block_byte_invariance(criterion):
    criterion(1, "block bytes invariant in p")
    b = Budget(1)
    for B_base in (4, 16):
        kv = KVCacheAdaptor(LLAMA_70B, B_base, 1, 16)
        for p in (1, 2, 4, 8):
            assert adapt_block_size(p, B_base) * (LLAMA_70B.kv_width // p) * LLAMA_70B.elem_bytes \
                == kv.M_block
    assert [adapt_block_size(p, 4) for p in (1, 2, 4)] == [4, 8, 16]
    b.check()


def test_c02_group_enumeration(criterion):
    criterion(2, "aligned group enumeration")
    b = Budget(1)
    groups = enumerate_tp_groups(4, [2, 4])
    assert set(groups) == {(0, 1), (2, 3), (0, 1, 2, 3)} and len(groups) == 3
    assert len(enumerate_tp_groups(8, [2, 4, 8])) == 7
    with pytest.raises(UnknownGroup):
        get_group(build_pool(groups), (1, 2))
    b.check()


def test_c03_tp_numeric_equivalence(criterion):
    criterion(3, "sharded forward == dense within 1e-9")
    b = Budget(5)
    dims = ToyDims(hidden_dim=16, num_heads=4, head_dim=4, num_layers=2)
    worst = 0.0
    for seed in range(100):
        store = load_weights(LLAMA_70B, seed, dims)
        x = np.random.default_rng(seed).standard_normal((3, dims.hidden_dim))
        dense = dense_forward_toy(store, x)
        for m in (1, 2, 4):
            out = tp_forward_toy([store] * m, list(range(m)), x)
            worst = max(worst, float(np.max(np.abs(out - dense))))
    assert worst <= 1e-9, worst
    b.check()


def test_c04_zero_copy_switching(criterion):
    criterion(4, "1000 switches copy nothing")
    b = Budget(5)
    rnd = random.Random(4)
    store = load_weights(LLAMA_70B, 0, ToyDims(hidden_dim=16, num_heads=8, head_dim=2))
    alloc = store.alloc_bytes_total
    kv = KVCacheAdaptor(LLAMA_70B, 16, 8, 256)
    groups = enumerate_tp_groups(8, [2, 4, 8])
    reports = []
    live: dict[int, int] = {}
    for i in range(1000):
        p = rnd.choice((1, 2, 4, 8))
        switch_weight_mode(store, p, rnd.randrange(p), supported=(2, 4, 8))
        if len(live) < 6:
            kv.allocate(i, rnd.randint(1, 600), 1, (rnd.randrange(8),))
            live[i] = 1
        rid = rnd.choice(sorted(live))
        g = rnd.choice([g for g in groups if len(g) == p]) if p > 1 else (rnd.randrange(8),)
        policy = rnd.choice(list(RemapPolicy))
        try:
            reports.append(kv.remap_on_switch(rid, p, policy, g))
        except OutOfBlocks:
            pass
        if rnd.random() < 0.2:
            kv.free(rid)
            del live[rid]
        kv.check_conservation()
    assert len(reports) >= 900
    assert store.generation == 1 and store.alloc_bytes_total == alloc
    assert kv.pool.realloc_count == 0
    assert all(r.blocks_copied == 0 for r in reports)
    # and through the scheduler
    res = run_simulation(random_requests(random.Random(9), 60), strategy=Strategy.HARD_PREEMPT,
                         policy=ModeFromRequest(), sim=SMALL)
    assert res.scheduler.remaps and all(r.blocks_copied == 0 for _, _, r in res.scheduler.remaps)
    assert res.scheduler.kv.pool.realloc_count == 0
    b.check()


def _exactly_once(res) -> None:
    rejected = set(res.rejected)
    for r in res.requests:
        if r.id in rejected:
            assert not res.emits.get(r.id)
            continue
        ts = res.emits[r.id]
        assert len(ts) == r.output_tokens
        assert all(a <= b for a, b in zip(ts, ts[1:])) and ts[0] >= r.arrival_us


def test_c05_preemption_semantics(criterion, monkeypatch):
    criterion(5, "preemption oracle, recompute count, exactly-once")
    b = Budget(60)
    # hard preempt vs. serial replay, exact to the microsecond
    for seed in range(60):
        base, high = serial_replay_case(seed)
        oracle = run_simulation(base, strategy=Strategy.HARD_PREEMPT, policy=ModeFromRequest(),
                                sim=SMALL)
        with monkeypatch.context() as mp:
            hosts = hosts_of(mp)
            res = run_simulation(base + [high], strategy=Strategy.HARD_PREEMPT,
                                 policy=ModeFromRequest(), sim=SMALL)
        s = res.scheduler
        (setp,) = [w for w in s.switches if w.kind == "SetTP"]
        (reset,) = [w for w in s.switches if w.kind == "ResetTP"]
        done0 = {q.id: q.finished_us for q in oracle.requests}
        paused = {rid for _, _, ev, rid, _ in s.decision_log if ev == "Pause"}
        for q in res.requests:
            if q.id == high.id:
                continue
            if q.id not in paused:
                assert q.finished_us == done0[q.id]
                continue
            (m,) = hosts[q.id]
            halt = max(end for mem, _, end, _ in s.step_log if mem == (m,) and end <= setp.issued_us)
            assert q.finished_us == done0[q.id] + (reset.issued_us - halt) + L_US
        assert all(r.tokens_to_recompute == 0 for _, _, r in s.remaps)

    # soft preempt: every speculatively produced token is recomputed
    rnd = random.Random(55)
    speculated = 0
    for _ in range(30):
        reqs = random_requests(rnd, 40, horizon_ms=200, prompt=(50, 800), output=(20, 200))
        s = run_simulation(reqs, strategy=Strategy.SOFT_PREEMPT, policy=ModeFromRequest(),
                           sim=SMALL).scheduler
        assert s.speculative_tokens == s.recompute_tokens
        speculated += len(s.speculative_tokens)
    assert speculated > 0

    # exactly-once emission on 10^4 random traces
    rnd = random.Random(5)
    sim = SimConfig(blocks_per_engine=64, chunk_tokens=64, max_batch=4)
    for _ in range(10_000):
        reqs = random_requests(rnd, rnd.randint(1, 6), horizon_ms=30, prompt=(1, 200),
                               output=(1, 12), high_frac=0.3)
        policy = rnd.choice([ModeFromRequest(), LoadAdaptive(window_ms=50, low_rps=40,
                                                             high_rps=120)])
        res = run_simulation(reqs, strategy=rnd.choice(list(Strategy)), policy=policy, sim=sim)
        _exactly_once(res)
        res.scheduler.kv.check_conservation()
        assert res.scheduler.kv.allocated_count() == 0
    b.check()


def test_c06_deadlock_freedom(criterion):
    criterion(6, "10^5 steps, no MismatchFault, uniform epochs")
    b = Budget(60)
    rnd = random.Random(6)
    steps = switches = 0
    sim = SimConfig(blocks_per_engine=512)
    while steps < 100_000:
        reqs = random_requests(rnd, 200, horizon_ms=20_000, prompt=(16, 1500), output=(4, 120),
                               high_frac=0.3)
        # MismatchFault would propagate out of run_simulation
        res = run_simulation(reqs, strategy=rnd.choice(list(Strategy)), policy=ModeFromRequest(),
                             sim=sim)
        s = res.scheduler
        steps += s.steps_launched
        for w in s.switches:
            assert {a.epoch for a in w.acks} == {w.epoch}
            assert len(w.acks) == len(w.group)
            switches += 1
        assert all(row[-1] == "ok" for row in s.pool.log)
        _exactly_once(res)
    assert switches > 100
    b.check()


def test_c07_capacity_model(criterion):
    criterion(7, "max_context monotone, 8TP/2TP >= 4, dynamic gap <= 17%")
    b = Budget(1)
    cfg = DeploymentConfig()
    caps = {p: max_context(LLAMA_70B, cfg, p) for p in (2, 4, 8)}
    dyn = max_context(LLAMA_70B, cfg, 8, dynamic_mode=True)
    assert caps[2] < caps[4] < caps[8]
    assert caps[8] / caps[2] >= 4
    assert 1 - dyn / caps[8] <= 0.17
    for got, target in ((caps[2], 264e3), (caps[4], 959e3), (caps[8], 2.3e6), (dyn, 1.9e6)):
        assert abs(got / target - 1) <= 0.35, (got, target)
    b.check()


def test_c08_switch_latency(criterion):
    criterion(8, "live switch == 15 ms, cold start / live >= 1e4")
    b = Budget(1)
    req = Request(0, ms_to_us(5.0), 400, 8, Priority.HIGH, Mode(4))
    for strategy in Strategy:
        s = run_simulation([req], strategy=strategy, policy=ModeFromRequest(), sim=SMALL).scheduler
        (setp,) = [w for w in s.switches if w.kind == "SetTP"]
        assert setp.issued_us == req.arrival_us
        first_tp = min(start for mem, start, _, _ in s.step_log if len(mem) == 4)
        assert first_tp - setp.issued_us == L_US
        assert all(w.effective_us - w.issued_us == L_US for w in s.switches)
    cost = CostModel()
    assert cost.cold_start_ms / cost.switch_latency_ms >= 1e4
    b.check()


def _ratio(a: float, b: float) -> float:
    return a / b


def test_c09_end_to_end_trends(criterion, capsys):
    criterion(9, "bursty trace trends vs static DP/TP")
    b = Budget(300)
    trace = generate_trace(WorkloadSpec(seed=1, num_requests=4000,
                                        phase_durations_ms=(180_000.0, 15_000.0)))
    dp = summarize(run_simulation(trace, policy=StaticMode(1)))
    tp = summarize(run_simulation(trace, policy=StaticMode(4)))
    dyn = summarize(run_simulation(trace, policy=LoadAdaptive()))
    a = _ratio(dyn.peak_throughput_tps, dp.peak_throughput_tps)
    bb = _ratio(dyn.ttft_mean_ms["low"], tp.ttft_mean_ms["low"])
    c = _ratio(tp.ttft_p90_ms["high"], dyn.ttft_p90_ms["high"])
    d = _ratio(dyn.median_tpot_ms, dp.median_tpot_ms)
    with capsys.disabled():
        print(f"\n  peak/DP={a:.3f} lowTTFT/TP={bb:.3f} burstP90 TP/dyn={c:.2f} TPOT/DP={d:.3f}")
    assert a >= 0.90
    assert bb <= 1.2
    assert c >= 1.5
    assert d <= 0.7
    b.check()


def test_c10_mixed_priority(criterion, capsys):
    criterion(10, "hard preempt priority TTFT vs static TP")
    b = Budget(120)
    trace = generate_trace(WorkloadSpec(seed=3, num_requests=1000, low_rate=(3.0, 5.0),
                                        high_rate=(3.0, 5.0), output_range=(512, 1536),
                                        priority_fraction=0.05, tp_hint_degree=2))
    tp = summarize(run_simulation(trace, policy=StaticMode(4)))
    ours = summarize(run_simulation(trace, strategy=Strategy.HARD_PREEMPT,
                                    policy=ModeFromRequest()))
    prio = ours.by_priority["high"]["ttft_mean_ms"] / tp.by_priority["high"]["ttft_mean_ms"]
    speedup = tp.ttft_mean_ms["all"] / ours.ttft_mean_ms["all"]
    with capsys.disabled():
        print(f"\n  priority TTFT ours/TP={prio:.2f} all-request TP/ours={speedup:.1f}x")
    assert prio <= 1.3
    assert speedup >= 5
    b.check()
