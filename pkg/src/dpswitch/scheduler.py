"""Iteration-level scheduler with online DP/TP mode switching.

Each call to :meth:`Scheduler.schedule_iteration` runs the seven steps in
order: ingest, workload sync, per-request mode determination, KV
parameterization and allocation, mode signaling, collective execution, and
output publication (the last happens in :meth:`Scheduler.complete_step`, when
the simulator retires a step).

Engines are grouped into *units*: one DP unit per engine in DP mode, and one
shared unit per active TP group. A TP request that needs engines still busy
with DP work binds to a *reservation* on an aligned group; the reservation's
strategy decides how the group is freed:

* Sequential: members stop taking DP work and switch once all of it drains.
* Soft preempt: drained members speculatively run the bound TP requests in
  DP mode; at the switch their KV is remapped with recomputation.
* Hard preempt: members stop at the next step boundary, their DP requests
  are paused with KV left resident, and they resume after the TP unit empties.
"""

from __future__ import annotations

import enum
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from .comms import (Ack, ControlKind, ControlMessage, ControlPlane, GroupPool, MismatchFault,
                    all_reduce, broadcast_mode, enumerate_tp_groups, get_group, order_key,
                    queue_digest)
from .core import (DP, DeploymentConfig, EngineState, Mode, ModelSpec, Priority, Request,
                   RequestState, ms_to_us)
from .kvcache import KVCacheAdaptor, OutOfBlocks, RemapPolicy, RemapReport, adapt_block_size


class Strategy(enum.Enum):
    SEQUENTIAL = "sequential"
    SOFT_PREEMPT = "soft_preempt"
    HARD_PREEMPT = "hard_preempt"

    @classmethod
    def parse(cls, text: str) -> Strategy:
        try:
            return cls(text.strip().lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown strategy {text!r}; choose from "
                             f"{[s.value for s in cls]}") from None


class NoFeasibleDegree(ValueError):
    pass


@dataclass(frozen=True)
class ModeFromRequest:
    """Use each request's own mode hint; requests without one run in ``default``."""

    default: Mode = DP


@dataclass(frozen=True)
class LoadAdaptive:
    """Low windowed arrival rate -> TP(``degree``); high -> DP; the band in
    between keeps the previous regime."""

    low_rps: float = 6.0
    high_rps: float = 10.0
    window_ms: float = 5_000.0
    degree: int = 4
    drain_per_engine: float = 8.0

    def __post_init__(self) -> None:
        if not 0 <= self.low_rps <= self.high_rps:
            raise ValueError("need 0 <= low_rps <= high_rps")
        if self.window_ms <= 0:
            raise ValueError("window_ms must be positive")


@dataclass(frozen=True)
class StaticMode:
    """Baseline: every request runs at one fixed degree (1 = static DP)."""

    degree: int = 1


Policy = ModeFromRequest | LoadAdaptive | StaticMode


@dataclass(frozen=True)
class KVParams:
    B_req: int
    H_req: int


def kv_params(B_base: int, H_base: int, n_eng: int) -> KVParams:
    if n_eng < 1 or H_base % n_eng:
        raise ValueError(f"{n_eng} engines do not divide {H_base} KV heads")
    return KVParams(B_base * n_eng, H_base // n_eng)


def assign_mode(req: Request, load_estimate: float, policy: Policy, *,
                degrees: Sequence[int] = (2, 4, 8), capacity: Mapping[int, int] | None = None,
                previous: Mode = DP) -> Mode:
    """Pick the execution mode for ``req``.

    ``load_estimate`` is the windowed arrival rate (req/s). ``capacity`` maps a
    degree (including 1) to the tokens one unit of that degree can hold; when
    given, requests that fit nowhere raise NoFeasibleDegree.
    """
    tp_degrees = sorted(p for p in degrees if p > 1)
    need = req.total_tokens

    def fits(p: int) -> bool:
        return capacity is None or capacity.get(p, 0) >= need

    if isinstance(policy, LoadAdaptive):
        if not tp_degrees:
            raise NoFeasibleDegree("no TP degree configured")
        if not fits(tp_degrees[-1]):
            raise NoFeasibleDegree(f"request {req.id}: {need} tokens exceed every degree")
        if req.priority is Priority.HIGH:
            return Mode(tp_degrees[-1])
        if not fits(1):
            return Mode(next(p for p in tp_degrees if fits(p)))
        if load_estimate < policy.low_rps:
            return Mode(policy.degree)
        if load_estimate >= policy.high_rps:
            return DP
        return previous

    if isinstance(policy, StaticMode):
        mode = Mode(policy.degree)
    else:
        mode = req.mode if req.mode is not None else policy.default
    if mode.is_tp and mode.degree not in tp_degrees:
        raise NoFeasibleDegree(f"request {req.id}: degree {mode.degree} not supported")
    if not fits(mode.degree):
        raise NoFeasibleDegree(f"request {req.id}: {need} tokens exceed {mode} capacity")
    return mode


# -- transition plans -------------------------------------------------------

@dataclass(frozen=True)
class TransitionPlan:
    """When a group switches to TP and what each member does until then.

    Times are integer microseconds; ``idle_us`` is per-member waiting time.
    """

    strategy: Strategy
    group: tuple[int, ...]
    switch_at_us: int
    idle_us: dict[int, int]
    speculative_engine: int | None = None
    speculative_tokens: int = 0
    tokens_to_recompute: int = 0
    paused: tuple[int, ...] = ()


def switch_sequential(group: Sequence[int], pending: Request | None,
                      busy_until: Mapping[int, int], now: int = 0) -> TransitionPlan:
    """Switch when the straggler finishes; everyone else idles until then."""
    free = {e: max(now, busy_until.get(e, now)) for e in group}
    t = max(free.values(), default=now)
    return TransitionPlan(Strategy.SEQUENTIAL, tuple(group), t, {e: t - free[e] for e in group})


def switch_soft_preempt(group: Sequence[int], pending: Request, busy_until: Mapping[int, int],
                        decode_ms_per_token: float, now: int = 0) -> TransitionPlan:
    """The earliest-free member decodes ``pending`` in DP until the switch.

    Without an idle window this is the Sequential plan.
    """
    seq = switch_sequential(group, pending, busy_until, now)
    e0 = min(group, key=lambda e: (max(now, busy_until.get(e, now)), e))
    window = seq.idle_us[e0]
    per_token = ms_to_us(decode_ms_per_token)
    tokens = min(pending.output_tokens, window // per_token) if per_token > 0 else 0
    if tokens <= 0:
        return seq
    idle = dict(seq.idle_us)
    idle[e0] = 0
    return TransitionPlan(Strategy.SOFT_PREEMPT, seq.group, seq.switch_at_us, idle,
                          speculative_engine=e0, speculative_tokens=tokens,
                          tokens_to_recompute=tokens)


def switch_hard_preempt(group: Sequence[int], pending: Request,
                        active: Mapping[int, Sequence[int]],
                        step_end: Mapping[int, int] | None = None, now: int = 0,
                        allow_normal: bool = False) -> TransitionPlan:
    """Pause every active DP request at the members' next step boundary."""
    if pending.priority is not Priority.HIGH and not allow_normal:
        raise ValueError("hard preempt is reserved for high-priority requests")
    step_end = step_end or {}
    free = {e: max(now, step_end.get(e, now)) for e in group}
    t = max(free.values(), default=now)
    paused = tuple(rid for e in group for rid in active.get(e, ()))
    return TransitionPlan(Strategy.HARD_PREEMPT, tuple(group), t,
                          {e: t - free[e] for e in group}, paused=paused)


# -- runtime structures -----------------------------------------------------

@dataclass(eq=False)
class Unit:
    """An execution unit: one DP engine, or a TP group stepping in lockstep."""

    members: tuple[int, ...]
    requests: list[Request] = field(default_factory=list)
    busy: bool = False
    ready_at: int = 0

    @property
    def degree(self) -> int:
        return len(self.members)


@dataclass(eq=False)
class StepPlan:
    unit: Unit
    start_us: int
    prefill: list[tuple[Request, int]]
    decode: list[Request]
    digest: str
    end_us: int = 0

    @property
    def degree(self) -> int:
        return self.unit.degree

    @property
    def prefill_tokens(self) -> int:
        return sum(n for _, n in self.prefill)


@dataclass(eq=False)
class Reservation:
    group: tuple[int, ...]
    strategy: Strategy
    trigger: Request
    bound: list[Request] = field(default_factory=list)
    spec_tp: int = 0  # per-member blocks the speculating requests will need under TP


@dataclass(frozen=True)
class SwitchRecord:
    kind: str
    group: tuple[int, ...]
    issued_us: int
    effective_us: int
    epoch: int
    acks: tuple[Ack, ...]


@dataclass
class IterationReport:
    iteration: int
    time_us: int
    flag: str | None = None
    n_eng: int = 1
    n_tp: int = 1
    kv_params: KVParams | None = None
    q_work: list[tuple[int, list[int]]] = field(default_factory=list)
    launched: list[StepPlan] = field(default_factory=list)
    switches: list[SwitchRecord] = field(default_factory=list)

    @property
    def idle(self) -> bool:
        return self.flag is None and not self.launched and not self.switches


DECISION_EVENTS = ("SetTP", "ResetTP", "Pause", "Resume", "Speculate", "Recompute")


def format_decision_log(rows) -> list[str]:
    """``time_ms,iteration,event,req_id,group`` lines (req_id -1 when none)."""
    return [f"{t / 1000:.3f},{it},{ev},{rid},{'-'.join(map(str, g))}"
            for t, it, ev, rid, g in rows]


class Scheduler:
    """Single logical scheduling loop over ``cfg.num_engines`` engines."""

    def __init__(self, spec: ModelSpec, cfg: DeploymentConfig, kv: KVCacheAdaptor, pool: GroupPool,
                 strategy: Strategy = Strategy.SOFT_PREEMPT, policy: Policy | None = None, *,
                 max_batch: int = 32, chunk_tokens: int = 512, hard_preempt_normal: bool = False):
        if max_batch < 1 or chunk_tokens < 1:
            raise ValueError("max_batch and chunk_tokens must be >= 1")
        self.spec = spec
        self.cfg = cfg
        self.kv = kv
        self.pool = pool
        self.strategy = strategy
        self.policy = policy if policy is not None else ModeFromRequest()
        self.max_batch = max_batch
        self.chunk_tokens = chunk_tokens
        self.hard_preempt_normal = hard_preempt_normal
        self.L = ms_to_us(cfg.switch_latency_ms)

        n = cfg.num_engines
        self.engines = {e: EngineState(e) for e in range(n)}
        self.control = ControlPlane(range(n))
        self.dp_units = {e: Unit((e,)) for e in range(n)}
        self.tp_units: dict[tuple[int, ...], Unit] = {}
        self.reservations: dict[tuple[int, ...], Reservation] = {}
        self.engine_res: dict[int, Reservation] = {}
        self.paused: dict[int, list[Request]] = {e: [] for e in range(n)}
        self._handback: dict[int, list[Request]] = {e: [] for e in range(n)}
        self.groups = enumerate_tp_groups(n, cfg.supported_tp_degrees)
        self.bpe = kv.pool.blocks_per_engine
        self.commit = [0] * n
        self._commit_of: dict[int, tuple[tuple[int, ...], int]] = {}
        self.capacity = {p: self.bpe * adapt_block_size(p, cfg.B_base) for p in cfg.degrees}

        self.q_in: list[Request] = []
        self.local: dict[int, list[Request]] = {e: [] for e in range(n)}
        self._home: dict[int, int] = {}
        self.q_wait: tuple[Request, ...] = ()
        self.digest = queue_digest(())
        self._wait_dirty = False
        self._capacity_dirty = True
        self._blocked: set[Mode] = set()
        self._ingested = 0
        self._taken: set[int] = set()

        self.regime = DP
        self._arrivals: deque[int] = deque()
        self.load = 0.0

        self.iteration = 0
        self.now = 0
        self.decision_log: list[tuple[int, int, str, int, tuple[int, ...]]] = []
        self.switches: list[SwitchRecord] = []
        self.step_log: list[tuple[tuple[int, ...], int, int, str]] = []
        self.emits: dict[int, list[int]] = {}
        self.finished: list[Request] = []
        self.rejected: list[Request] = []
        self.remaps: list[tuple[int, RemapPolicy, RemapReport]] = []
        self.speculative_tokens: dict[int, int] = {}
        self.recompute_tokens: dict[int, int] = {}
        self.demoted_tokens: dict[int, int] = {}
        self.preempt_rejections: list[tuple[int, int]] = []
        self._rejected_once: set[int] = set()
        self.work_conservation_violations = 0
        self.steps_launched = 0
        for h in pool.handles.values():
            h.clock = lambda: self.now
        if isinstance(self.policy, StaticMode) and self.policy.degree > 1:
            for g in self.groups:
                if len(g) == self.policy.degree:
                    self._startup_tp(g)

    # -- bookkeeping -------------------------------------------------------

    def _log(self, event: str, rid: int, group: tuple[int, ...], t: int | None = None) -> None:
        self.decision_log.append((self.now if t is None else t, self.iteration, event, rid, group))

    def _commit_add(self, req: Request, members: tuple[int, ...], p: int) -> None:
        need = self.kv.blocks_needed(req.total_tokens, p)
        for m in members:
            self.commit[m] += need
        self._commit_of[req.id] = (members, need)

    def _commit_release(self, req: Request) -> None:
        members, need = self._commit_of.pop(req.id)
        for m in members:
            self.commit[m] -= need

    def _room(self, members: tuple[int, ...], need: int) -> bool:
        return all(self.commit[m] + need <= self.bpe for m in members)

    def _admit(self, req: Request, members: tuple[int, ...], mode: Mode, now: int,
               state: RequestState = RequestState.RUNNING) -> list[int]:
        ids = self.kv.allocate(req.id, req.prompt_tokens, mode.degree, members)
        self._commit_add(req, members, mode.degree)
        req.assigned = mode
        req.transition(state)
        req.prefill_left = req.prompt_tokens
        if req.admitted_us is None:
            req.admitted_us = now
        self.emits.setdefault(req.id, [])
        return ids

    def _startup_tp(self, g: tuple[int, ...]) -> None:
        msg = ControlMessage(ControlKind.SET_TP, self.control.epoch, len(g), g)
        acks = broadcast_mode(self.engines, msg, self.pool)
        self.tp_units[g] = Unit(g)
        self.switches.append(SwitchRecord("SetTP", g, 0, 0, msg.epoch, tuple(acks)))
        self._log("SetTP", -1, g, 0)

    @property
    def pending(self) -> int:
        """Requests ingested but not yet finished or rejected."""
        return self._ingested + len(self.q_in) - len(self.finished) - len(self.rejected)

    # -- mode determination ------------------------------------------------

    def _mode_for(self, req: Request) -> Mode:
        if req.assigned is not None:
            return req.assigned
        return assign_mode(req, self.load, self.policy, degrees=self.cfg.supported_tp_degrees,
                           capacity=self.capacity, previous=self.regime)

    def _update_load(self, now: int) -> bool:
        if not isinstance(self.policy, LoadAdaptive):
            return False
        window = ms_to_us(self.policy.window_ms)
        while self._arrivals and self._arrivals[0] <= now - window:
            self._arrivals.popleft()
        self.load = len(self._arrivals) * 1e6 / window
        old = self.regime
        backlog = (DP in self._blocked
                   or self._dp_active() > self.policy.drain_per_engine * len(self.engines))
        if backlog and self.regime == DP:
            # work left over from a burst keeps the DP regime until it drains
            self.load = max(self.load, self.policy.low_rps)
        if self.load < self.policy.low_rps:
            self.regime = Mode(self.policy.degree)
        elif self.load >= self.policy.high_rps:
            self.regime = DP
        return self.regime != old

    def _dp_active(self) -> int:
        return sum(len(u.requests) for e, u in self.dp_units.items() if not self.engines[e].is_tp)

    def _wants_tp(self, n: int) -> bool:
        if isinstance(self.policy, StaticMode):
            return self.policy.degree == n
        other = any(m.is_tp and m.degree != n for m in self._blocked)
        other = other or any(len(g) != n for g in self.reservations)
        if isinstance(self.policy, LoadAdaptive):
            return self.regime == Mode(n) and not other
        return Mode(n) in self._blocked and not other

    # -- placement ---------------------------------------------------------

    def _place(self, req: Request, mode: Mode, now: int):
        """Admit ``req`` somewhere. Returns block ids, ``"bound"`` if it joined
        a forming group, or None if nothing can take it right now."""
        if not mode.is_tp:
            need = self.kv.blocks_needed(req.total_tokens, 1)
            best = None
            for e, u in self.dp_units.items():
                if self.engines[e].is_tp or e in self.engine_res:
                    continue
                if len(u.requests) >= self.max_batch or self.commit[e] + need > self.bpe:
                    continue
                key = (len(u.requests), e)
                if best is None or key < best:
                    best = key
            if best is None:
                return None
            e = best[1]
            ids = self._admit(req, (e,), mode, now)
            self.dp_units[e].requests.append(req)
            return ids

        n = mode.degree
        need = self.kv.blocks_needed(req.total_tokens, n)
        high = req.priority is Priority.HIGH
        cands = []
        for g, u in self.tp_units.items():
            if len(g) == n and len(u.requests) < self.max_batch and self._room(g, need):
                cands.append((len(u.requests), 0, g))
        for g, res in self.reservations.items():
            if len(g) == n and len(res.bound) < self.max_batch:
                cands.append((len(res.bound), 1, g))
        best = min(cands) if cands else None
        if best is None or (best[0] > 0 and not (high and best[1] == 0)):
            hard = self.strategy is Strategy.HARD_PREEMPT and (high or self.hard_preempt_normal)
            g = self._pick_group(n, need if hard else None)
            if g is None and hard:
                # paused KV stays resident, so no group can take this request
                # by preemption; wait for one to drain instead
                g = self._pick_group(n)
                hard = False
            if g is not None:
                if hard:
                    strat = Strategy.HARD_PREEMPT
                elif self.strategy is Strategy.HARD_PREEMPT:
                    strat = Strategy.SEQUENTIAL
                else:
                    strat = self.strategy
                res = Reservation(g, strat, req)
                self.reservations[g] = res
                for m in g:
                    self.engine_res[m] = res
                best = (0, 1, g)
            elif best is None:
                if high and self.strategy is Strategy.HARD_PREEMPT and req.id not in self._rejected_once:
                    # every candidate group is mid-episode; TP episodes are not preemptible
                    self._rejected_once.add(req.id)
                    self.preempt_rejections.append((now, req.id))
                return None
        _, kind, g = best
        if kind == 0:
            ids = self._admit(req, g, mode, now)
            self.tp_units[g].requests.append(req)
            return ids
        res = self.reservations[g]
        req.assigned = mode
        req.target_group = g
        res.bound.append(req)
        if high and self.strategy is Strategy.HARD_PREEMPT and self._room(g, need):
            res.strategy = Strategy.HARD_PREEMPT
        return "bound"

    def _pick_group(self, n: int, resident_need: int | None = None) -> tuple[int, ...] | None:
        """Least-loaded free group of size ``n``. With ``resident_need``, only
        groups that can hold that many more blocks next to their current KV."""
        best = None
        for g in self.groups:
            if len(g) != n:
                continue
            if any(m in self.engine_res or self.engines[m].is_tp for m in g):
                continue
            if resident_need is not None and not self._room(g, resident_need):
                continue
            key = (sum(len(self.dp_units[m].requests) for m in g), g)
            if best is None or key < best:
                best = key
        return None if best is None else best[1]

    # -- mode signaling ----------------------------------------------------

    def _drained(self, res: Reservation) -> bool:
        return not any(r.state is RequestState.RUNNING
                       for m in res.group for r in self.dp_units[m].requests)

    def _ready(self, res: Reservation, now: int) -> bool:
        for m in res.group:
            u = self.dp_units[m]
            if u.busy or u.ready_at > now:
                return False
        return res.strategy is Strategy.HARD_PREEMPT or self._drained(res)

    def _speculate(self, res: Reservation, now: int) -> None:
        unstarted = [r for r in res.bound if r.state is RequestState.QUEUED]
        if not unstarted or self._drained(res):
            return
        # any member with a free slot pre-executes; the least loaded goes first
        hosts = list(res.group)
        n = len(res.group)
        for r in unstarted:
            need = self.kv.blocks_needed(r.total_tokens, 1)
            need_tp = self.kv.blocks_needed(r.total_tokens, n)
            # the switch remaps speculative KV onto every member: keep room for it
            if not all(self.commit[m] + res.spec_tp + need_tp <= self.bpe for m in hosts):
                break
            ok = [m for m in hosts if len(self.dp_units[m].requests) < self.max_batch
                  and self.commit[m] + need + res.spec_tp + need_tp <= self.bpe]
            if not ok:
                break
            m = min(ok, key=lambda m: (len(self.dp_units[m].requests), m))
            self._admit(r, (m,), DP, now, RequestState.SPECULATIVE_DP)
            res.spec_tp += need_tp
            r.assigned = Mode(len(res.group))
            self.dp_units[m].requests.append(r)
            self._log("Speculate", r.id, res.group)
        if any(r.state is RequestState.QUEUED for r in res.bound):
            for m in hosts:
                u = self.dp_units[m]
                if not u.requests and not u.busy:
                    self.work_conservation_violations += 1

    def _switch_to_tp(self, res: Reservation, now: int, rep: IterationReport) -> None:
        g, n = res.group, len(res.group)
        del self.reservations[g]
        for m in g:
            del self.engine_res[m]
        mode = Mode(n)
        unit = Unit(g, ready_at=now + self.L)
        for m in g:
            dp = self.dp_units[m]
            for r in dp.requests:
                if r.state is RequestState.SPECULATIVE_DP:
                    produced = r.prompt_tokens + max(0, r.emitted - 1)
                    self._commit_release(r)
                    report = self.kv.remap_on_switch(r.id, n, RemapPolicy.RECOMPUTE, g)
                    self._commit_add(r, g, n)
                    self.remaps.append((r.id, RemapPolicy.RECOMPUTE, report))
                    self.speculative_tokens[r.id] = produced
                    self.recompute_tokens[r.id] = report.tokens_to_recompute
                    r.transition(RequestState.RUNNING)
                    r.prefill_left = report.tokens_to_recompute
                    unit.requests.append(r)
                    self._log("Recompute", r.id, g)
                else:
                    report = self.kv.remap_on_switch(r.id, n, RemapPolicy.PRESERVE_RESIDENT)
                    self.remaps.append((r.id, RemapPolicy.PRESERVE_RESIDENT, report))
                    r.transition(RequestState.PAUSED)
                    self.paused[m].append(r)
                    self._log("Pause", r.id, g)
            dp.requests = []
        for r in res.bound:
            if r.state is not RequestState.QUEUED:
                continue
            need = self.kv.blocks_needed(r.total_tokens, n)
            if not self._room(g, need):
                # back to the wait queue; it will be placed again later
                r.assigned = None
                r.target_group = None
                self.local[self._home[r.id]].append(r)
                self._wait_dirty = True
                continue
            try:
                ids = self._admit(r, g, mode, now)
            except OutOfBlocks:
                r.assigned = None
                r.target_group = None
                self.local[self._home[r.id]].append(r)
                self._wait_dirty = True
                continue
            unit.requests.append(r)
            rep.q_work.append((r.id, ids))
        msg = ControlMessage(ControlKind.SET_TP, self.control.epoch + 1, n, g)
        acks = broadcast_mode(self.engines, msg, self.pool)
        self.tp_units[g] = unit
        rec = SwitchRecord("SetTP", g, now, now + self.L, msg.epoch, tuple(acks))
        self.switches.append(rec)
        rep.switches.append(rec)
        self._log("SetTP", res.trigger.id, g)
        self._capacity_dirty = True

    def _reset(self, g: tuple[int, ...], now: int, rep: IterationReport) -> None:
        del self.tp_units[g]
        msg = ControlMessage(ControlKind.RESET_TP, self.control.epoch + 1, 1, g)
        acks = broadcast_mode(self.engines, msg, self.pool)
        rec = SwitchRecord("ResetTP", g, now, now + self.L, msg.epoch, tuple(acks))
        self.switches.append(rec)
        rep.switches.append(rec)
        self._log("ResetTP", -1, g)
        for m in g:
            dp = self.dp_units[m]
            dp.ready_at = now + self.L
            for r in self.paused[m]:
                report = self.kv.remap_on_switch(r.id, 1, RemapPolicy.PRESERVE_RESIDENT)
                self.remaps.append((r.id, RemapPolicy.PRESERVE_RESIDENT, report))
                r.transition(RequestState.RUNNING)
                dp.requests.append(r)
                self._log("Resume", r.id, g)
            self.paused[m] = []
            dp.requests.extend(self._handback[m])
            self._handback[m] = []
        self._capacity_dirty = True

    def _signal(self, now: int, rep: IterationReport) -> None:
        for g in sorted(self.reservations):
            res = self.reservations[g]
            if res.strategy is Strategy.SOFT_PREEMPT:
                self._speculate(res, now)
            if not res.bound:
                # every bound request finished speculatively; no switch needed
                del self.reservations[g]
                for m in g:
                    del self.engine_res[m]
                self._capacity_dirty = True
                continue
            if self._ready(res, now):
                self._switch_to_tp(res, now, rep)
        for g in sorted(self.tp_units):
            u = self.tp_units[g]
            if u.busy or u.ready_at > now:
                continue
            if u.requests and self._should_demote(u):
                self._demote(u)
            if u.requests:
                continue
            if any(self.paused[m] or self._handback[m] for m in g) or not self._wants_tp(len(g)):
                self._reset(g, now, rep)

    def _should_demote(self, u: Unit) -> bool:
        # only the load-adaptive policy hands TP work back; priority TP stays put
        return (isinstance(self.policy, LoadAdaptive) and DP in self._blocked
                and not self._wants_tp(u.degree)
                and not any(r.priority is Priority.HIGH for r in u.requests))

    def _demote(self, u: Unit) -> None:
        """Move every request of ``u`` to a member engine in DP mode, rebuilding
        its KV there. Emitted tokens stand; only KV is recomputed."""
        load = {m: len(self.dp_units[m].requests) + len(self.paused[m]) for m in u.members}
        for r in list(u.requests):
            need = self.kv.blocks_needed(r.total_tokens, 1)
            ok = [m for m in u.members if self.commit[m] + need <= self.bpe]
            if not ok:
                continue
            m = min(ok, key=lambda m: (load[m], m))
            self._commit_release(r)
            report = self.kv.remap_on_switch(r.id, 1, RemapPolicy.RECOMPUTE, (m,))
            self._commit_add(r, (m,), 1)
            self.remaps.append((r.id, RemapPolicy.RECOMPUTE, report))
            self.demoted_tokens[r.id] = self.demoted_tokens.get(r.id, 0) + report.tokens_to_recompute
            r.assigned = DP
            r.prefill_left = report.tokens_to_recompute
            u.requests.remove(r)
            self._handback[m].append(r)
            load[m] += 1
            self._log("Recompute", r.id, u.members)

    # -- execution ---------------------------------------------------------

    def _launch(self, now: int, rep: IterationReport) -> None:
        units = [self.tp_units[g] for g in sorted(self.tp_units)]
        units += [self.dp_units[e] for e in sorted(self.dp_units) if not self.engines[e].is_tp]
        for u in units:
            if u.busy or u.ready_at > now or not u.requests:
                continue
            if u.degree == 1:
                res = self.engine_res.get(u.members[0])
                if res is not None and (res.strategy is Strategy.HARD_PREEMPT or self._drained(res)):
                    continue
            budget = self.chunk_tokens
            prefill, decode = [], []
            for r in u.requests:
                if r.prefill_left == 0:
                    if len(decode) < self.max_batch:
                        decode.append(r)
                elif budget > 0:
                    take = min(budget, r.prefill_left)
                    prefill.append((r, take))
                    budget -= take
            if not prefill and not decode:
                continue
            step = StepPlan(u, now, prefill, decode, self.digest)
            if u.degree > 1:
                self._collective(u, step)
            u.busy = True
            rep.launched.append(step)
            self.steps_launched += 1

    def _collective(self, u: Unit, step: StepPlan) -> None:
        """Every member posts the step's all-reduce on the group it believes it is in."""
        tokens = step.prefill_tokens + len(step.decode)
        nbytes = tokens * self.spec.hidden_dim * self.spec.elem_bytes
        touched = {}
        for m in u.members:
            grp = self.engines[m].group
            if grp is None:
                raise MismatchFault(u.members, ("all_reduce", 0), ("none", -1), m,
                                    "member is not in TP mode")
            h = get_group(self.pool, grp)
            touched[grp] = h
            all_reduce(h, m, nbytes)
        for grp, h in touched.items():
            if h.pending:
                rank = next(iter(h.pending))
                raise h._fault(rank, "all_reduce", h.seq, None, "group members diverged")

    # -- the iteration -----------------------------------------------------

    def submit(self, req: Request) -> None:
        self.q_in.append(req)

    def _determine(self, now: int, rep: IterationReport, new: list[Request]) -> None:
        """Mode determination, per-request KV parameters and allocation."""
        regime_changed = self._update_load(now)
        full = self._capacity_dirty or regime_changed
        scan = self.q_wait if full else sorted(new, key=order_key)
        if full:
            self._blocked = set()
        self._capacity_dirty = False
        taken = set()
        for req in scan:
            if req.id in self._taken:
                continue
            try:
                mode = self._mode_for(req)
            except NoFeasibleDegree:
                self.rejected.append(req)
                taken.add(req.id)
                continue
            rep.n_eng = mode.degree
            if mode.is_tp:
                rep.n_tp = mode.degree
                rep.flag = "SetTP"
            else:
                rep.flag = "ResetTP"
            rep.kv_params = kv_params(self.cfg.B_base, self.spec.num_kv_heads, mode.degree)
            if mode in self._blocked:
                continue
            placed = self._place(req, mode, now)
            if placed is None:
                self._blocked.add(mode)
                continue
            taken.add(req.id)
            if placed != "bound":
                rep.q_work.append((req.id, placed))
        if taken:
            self._taken |= taken
            for e, q in self.local.items():
                if q:
                    self.local[e] = [r for r in q if r.id not in taken]
            self._wait_dirty = True

    def schedule_iteration(self, now: int) -> IterationReport:
        if now < self.now:
            raise ValueError(f"clock moved backwards: {now} < {self.now}")
        self.now = now
        self.iteration += 1
        self.control.heartbeat()
        rep = IterationReport(self.iteration, now)

        # (1) ingest
        new = []
        for r in self.q_in:
            self._ingested += 1
            r.ingest_epoch = self.control.epoch
            if isinstance(self.policy, LoadAdaptive):
                self._arrivals.append(r.arrival_us)
            home = r.id % self.cfg.num_engines
            self._home[r.id] = home
            self.local[home].append(r)
            new.append(r)
        self.q_in = []

        # (2) global sync
        if new or self._wait_dirty:
            self.q_wait, self.digest = self.control.sync(self.local)
            self._wait_dirty = False

        # (3)+(4) mode determination and allocation
        self._taken = set()
        self._determine(now, rep, new)

        # (5) mode signaling
        self._signal(now, rep)
        if self._capacity_dirty and self.q_wait:
            # a cancelled reservation freed engines within this iteration; no
            # later event would revisit the queue otherwise
            self._determine(now, rep, [])
            self._signal(now, rep)

        # (6) collective execute; (7) outputs publish when steps retire
        self._launch(now, rep)
        return rep

    def complete_step(self, step: StepPlan, now: int) -> list[Request]:
        """Retire ``step`` at ``now``: advance progress and publish tokens."""
        self.now = now
        u = step.unit
        u.busy = False
        step.end_us = now
        self.step_log.append((u.members, step.start_us, now, step.digest))
        done = []
        for r, n in step.prefill:
            r.prefill_left -= n
            if r.prefill_left == 0 and r.emitted == 0:
                if self._emit(r, u, now):
                    done.append(r)
        for r in step.decode:
            self.kv.append_tokens(r.id, 1)
            if self._emit(r, u, now):
                done.append(r)
        return done

    def _emit(self, r: Request, u: Unit, now: int) -> bool:
        self.emits[r.id].append(now)
        r.emitted += 1
        if r.emitted < r.output_tokens:
            return False
        if r.state is RequestState.SPECULATIVE_DP:
            # finished entirely during speculation: the DP result stands
            r.transition(RequestState.RUNNING)
            res = self.engine_res[u.members[0]]
            res.bound.remove(r)
            res.spec_tp -= self.kv.blocks_needed(r.total_tokens, len(res.group))
        r.transition(RequestState.FINISHED)
        r.finished_us = now
        self.kv.free(r.id)
        self._commit_release(r)
        u.requests.remove(r)
        self.finished.append(r)
        self._capacity_dirty = True
        return True

    def next_wakeup(self, now: int) -> int | None:
        """Earliest future time a switching unit becomes ready, if any."""
        times = [u.ready_at for u in self.tp_units.values() if u.ready_at > now]
        times += [u.ready_at for u in self.dp_units.values() if u.ready_at > now]
        return min(times) if times else None
