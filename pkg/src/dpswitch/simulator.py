"""Discrete-event replay of a trace through the scheduler on a virtual clock."""

from __future__ import annotations

import dataclasses
import heapq
from collections.abc import Sequence
from dataclasses import dataclass, field

from .comms import build_pool, enumerate_tp_groups, format_collective_log
from .core import (LLAMA_70B_FP8, DeploymentConfig, ModelSpec, Request, ms_to_us,
                   validate_deployment)
from .costmodel import CostModel
from .kvcache import KVCacheAdaptor
from .scheduler import (LoadAdaptive, Policy, Scheduler, StaticMode, Strategy,
                        format_decision_log)
from .workload import Phase, Trace

# event kinds in tie-break order at equal times
STEP_COMPLETE, SWITCH_EFFECTIVE, ARRIVAL = 0, 1, 2


class SimulationStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    spec: ModelSpec = LLAMA_70B_FP8
    max_batch: int = 32
    chunk_tokens: int = 512
    blocks_per_engine: int | None = None
    hard_preempt_normal: bool = False


@dataclass
class SimResult:
    requests: list[Request]
    emits: dict[int, list[int]]
    rejected: list[int]
    phases: list[Phase]
    end_us: int
    iterations: int
    scheduler: Scheduler = field(repr=False)

    @property
    def decision_log(self):
        return self.scheduler.decision_log

    @property
    def collective_log(self):
        return self.scheduler.pool.log

    def event_log(self) -> list[str]:
        """Decision and collective logs as text, for byte-level determinism checks."""
        return (["# decisions"] + format_decision_log(self.scheduler.decision_log)
                + ["# collectives"] + format_collective_log(self.scheduler.pool.log))


def _fresh(requests: Sequence[Request]) -> list[Request]:
    return [Request(r.id, r.arrival_us, r.prompt_tokens, r.output_tokens, r.priority, r.mode)
            for r in requests]


def run_simulation(trace: Trace | Sequence[Request], cfg: DeploymentConfig | None = None,
                   strategy: Strategy = Strategy.SOFT_PREEMPT, policy: Policy | None = None,
                   cost: CostModel | None = None, sim: SimConfig | None = None) -> SimResult:
    """Replay ``trace`` until every request finishes or is rejected.

    The cost model's switch latency is authoritative and overrides the config's.
    """
    cfg = cfg if cfg is not None else DeploymentConfig()
    cost = cost if cost is not None else CostModel()
    sim = sim if sim is not None else SimConfig()
    policy = policy if policy is not None else LoadAdaptive()
    cfg = dataclasses.replace(cfg, switch_latency_ms=cost.switch_latency_ms)
    validate_deployment(sim.spec, cfg)
    phases = list(trace.phases) if isinstance(trace, Trace) else []
    requests = _fresh(trace.requests if isinstance(trace, Trace) else trace)
    arrivals = sorted(requests, key=lambda r: (r.arrival_us, r.id))

    kv = KVCacheAdaptor.for_deployment(sim.spec, cfg, sim.blocks_per_engine)
    pool = build_pool(enumerate_tp_groups(cfg.num_engines, cfg.supported_tp_degrees))
    sched = Scheduler(sim.spec, cfg, kv, pool, strategy, policy, max_batch=sim.max_batch,
                      chunk_tokens=sim.chunk_tokens, hard_preempt_normal=sim.hard_preempt_normal)

    heap: list[tuple[int, int, int, int, object]] = []
    wakeups: set[int] = set()
    seq = 0
    i, n = 0, len(arrivals)
    now = 0
    inf = float("inf")
    while True:
        t_heap = heap[0][0] if heap else inf
        t_arr = arrivals[i].arrival_us if i < n else inf
        t = min(t_heap, t_arr)
        if t == inf:
            break
        if t < now:
            raise AssertionError("event scheduled in the past")
        now = int(t)
        while heap and heap[0][0] == now:
            _, kind, _, _, payload = heapq.heappop(heap)
            if kind == STEP_COMPLETE:
                sched.complete_step(payload, now)
                for e in payload.unit.members:
                    sched.engines[e].busy_until = now
            else:
                wakeups.discard(now)
        while i < n and arrivals[i].arrival_us == now:
            sched.submit(arrivals[i])
            i += 1
        rep = sched.schedule_iteration(now)
        for step in rep.launched:
            dur = max(1, ms_to_us(cost.mixed_step_ms(step.prefill_tokens, len(step.decode),
                                                      step.degree)))
            step.end_us = now + dur
            for e in step.unit.members:
                sched.engines[e].busy_until = step.end_us
            heapq.heappush(heap, (step.end_us, STEP_COMPLETE, step.unit.members[0], seq, step))
            seq += 1
        wake = sched.next_wakeup(now)
        if wake is not None and wake not in wakeups:
            wakeups.add(wake)
            heapq.heappush(heap, (wake, SWITCH_EFFECTIVE, -1, seq, None))
            seq += 1

    if sched.pending:
        raise SimulationStalled(f"{sched.pending} requests never completed")
    return SimResult(requests, sched.emits, sorted(r.id for r in sched.rejected), phases,
                     now, sched.iteration, sched)


@dataclass(frozen=True)
class RunConfig:
    """One leg of a comparison: ``mode`` is static_dp, static_tp or dynamic."""

    label: str
    mode: str = "dynamic"
    strategy: Strategy = Strategy.SOFT_PREEMPT
    policy: Policy | None = None


def policy_for(mode: str, tp_degree: int = 4) -> Policy:
    if mode == "static_dp":
        return StaticMode(1)
    if mode == "static_tp":
        return StaticMode(tp_degree)
    if mode == "dynamic":
        return LoadAdaptive(degree=tp_degree)
    raise ValueError(f"unknown mode {mode!r}; choose static_dp, static_tp or dynamic")


def compare_configs(trace: Trace | Sequence[Request], configs: Sequence[RunConfig | dict],
                    cfg: DeploymentConfig | None = None, cost: CostModel | None = None,
                    sim: SimConfig | None = None, tp_degree: int = 4) -> dict[str, SimResult]:
    """Simulate every config on the identical trace."""
    from .metrics import summarize  # noqa: F401  (fail early if metrics is broken)

    legs = [c if isinstance(c, RunConfig) else RunConfig(**c) for c in configs]
    if len(legs) < 2:
        raise ValueError("compare_configs needs at least two configs")
    out: dict[str, SimResult] = {}
    for leg in legs:
        strategy = leg.strategy if isinstance(leg.strategy, Strategy) else Strategy.parse(leg.strategy)
        policy = leg.policy if leg.policy is not None else policy_for(leg.mode, tp_degree)
        out[leg.label] = run_simulation(trace, cfg, strategy, policy, cost, sim)
    return out
