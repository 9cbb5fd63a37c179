"""Communicator pool and the two messaging planes.

Data plane: topology-contiguous rank groups are enumerated and built once at
startup; collectives are simulated synchronously as barrier-with-reduction,
and any divergence in posted (op, seq) is raised as a MismatchFault instead
of hanging.

Control plane: heartbeat epochs, workload sync into one global queue order,
and SetTP/ResetTP broadcasts applied atomically at a shared epoch.
"""

from __future__ import annotations

import enum
import hashlib
from array import array
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import reduce
from typing import Any

import numpy as np

from .core import EngineState, Priority, Request

HOST_MEM_BYTES_PER_GROUP = 2_000_000


class IndivisibleTPDegree(ValueError):
    pass


class UnknownGroup(LookupError):
    pass


class EpochSkew(RuntimeError):
    pass


class MismatchFault(RuntimeError):
    """A collective was posted inconsistently by group members."""

    def __init__(self, group: tuple[int, ...], expected: tuple[str, int] | None,
                 observed: tuple[str, int], rank: int, reason: str):
        self.group = group
        self.expected = expected
        self.observed = observed
        self.rank = rank
        self.reason = reason
        super().__init__(f"group {list(group)} rank {rank}: {reason} "
                         f"(expected {expected}, observed {observed})")


def enumerate_tp_groups(num_engines: int, degrees: Sequence[int]) -> list[tuple[int, ...]]:
    """Aligned contiguous segments ``[k*p, (k+1)*p)`` for every degree ``p``."""
    groups: list[tuple[int, ...]] = []
    for p in sorted(set(degrees)):
        if p < 1 or num_engines % p:
            raise IndivisibleTPDegree(f"degree {p} does not divide {num_engines} engines")
        if p == 1:
            continue
        groups.extend(tuple(range(k * p, (k + 1) * p)) for k in range(num_engines // p))
    return groups


@dataclass
class GroupHandle:
    members: tuple[int, ...]
    seq: int = 0
    pending: dict[int, tuple[str, int, Any]] = field(default_factory=dict)
    results: dict[int, Any] = field(default_factory=dict)
    log: list[tuple[int, tuple[int, ...], str, int, str]] | None = None
    clock: Any = None

    @property
    def key(self) -> tuple[int, ...]:
        return self.members

    def _record(self, op: str, seq: int, status: str) -> None:
        if self.log is not None:
            now = self.clock() if self.clock is not None else 0
            self.log.append((now, self.members, op, seq, status))

    def _fault(self, rank: int, op: str, seq: int, expected, reason: str) -> MismatchFault:
        self._record(op, seq, "mismatch")
        self.pending.clear()
        return MismatchFault(self.members, expected, (op, seq), rank, reason)

    def post(self, rank: int, op: str, payload: Any, seq: int | None = None) -> Any:
        """Post ``rank``'s contribution; returns the reduced value once the last
        member posts, otherwise None."""
        seq = self.seq if seq is None else seq
        if rank not in self.members:
            raise self._fault(rank, op, seq, None, "rank is not a group member")
        if rank in self.pending:
            raise self._fault(rank, op, seq, self.pending[rank][:2], "rank posted twice")
        if self.pending:
            first = next(iter(self.pending.values()))
            if (first[0], first[1]) != (op, seq):
                raise self._fault(rank, op, seq, (first[0], first[1]), "members disagree")
        elif seq != self.seq:
            raise self._fault(rank, op, seq, (op, self.seq), "out-of-order sequence number")
        self.pending[rank] = (op, seq, payload)
        if len(self.pending) < len(self.members):
            return None
        parts = [self.pending[r][2] for r in self.members]
        if isinstance(parts[0], np.ndarray):
            result = reduce(np.add, parts)
        else:
            if any(p != parts[0] for p in parts):
                raise self._fault(rank, op, seq, (op, seq), "byte counts disagree")
            result = parts[0]
        self.pending.clear()
        self.results = {r: result for r in self.members}
        self._record(op, seq, "ok")
        self.seq += 1
        return result


def all_reduce(handle: GroupHandle, rank: int, payload: Any, seq: int | None = None) -> Any:
    """Post an all-reduce; a toy ndarray payload is element-summed, an integer
    byte count is passed through (its cost lives in the cost model)."""
    return handle.post(rank, "all_reduce", payload, seq)


@dataclass
class GroupPool:
    handles: dict[tuple[int, ...], GroupHandle]
    init_cost_ms_each: float
    host_mem_bytes_each: int = HOST_MEM_BYTES_PER_GROUP
    construction_count: int = 0
    log: list[tuple[int, tuple[int, ...], str, int, str]] = field(default_factory=list)

    @property
    def startup_cost_ms(self) -> float:
        return len(self.handles) * self.init_cost_ms_each

    @property
    def host_mem_bytes(self) -> int:
        return len(self.handles) * self.host_mem_bytes_each

    def __len__(self) -> int:
        return len(self.handles)

    def __contains__(self, members) -> bool:
        return tuple(members) in self.handles


def build_pool(groups: Sequence[tuple[int, ...]], init_cost_ms: float = 0.0,
               host_mem_bytes_each: int = HOST_MEM_BYTES_PER_GROUP, clock=None) -> GroupPool:
    """Eagerly construct one handle per group; no construction happens later."""
    pool = GroupPool({}, init_cost_ms, host_mem_bytes_each)
    for g in groups:
        pool.handles[tuple(g)] = GroupHandle(tuple(g), log=pool.log, clock=clock)
        pool.construction_count += 1
    return pool


def get_group(pool: GroupPool, members: Sequence[int]) -> GroupHandle:
    try:
        return pool.handles[tuple(members)]
    except KeyError:
        raise UnknownGroup(f"group {list(members)} was not pre-initialized") from None


def format_collective_log(rows) -> list[str]:
    """``time_ms,group,op,seq,status`` lines; group ranks are joined by ``-``."""
    return [f"{t / 1000:.3f},{'-'.join(map(str, g))},{op},{seq},{status}"
            for t, g, op, seq, status in rows]


class ControlKind(enum.Enum):
    HEARTBEAT = "Heartbeat"
    SET_TP = "SetTP"
    RESET_TP = "ResetTP"
    WORKLOAD_SYNC = "WorkloadSync"


@dataclass(frozen=True)
class ControlMessage:
    kind: ControlKind
    epoch: int
    degree: int = 1
    group: tuple[int, ...] | None = None
    digest: str | None = None


@dataclass(frozen=True)
class Ack:
    engine_id: int
    epoch: int


def order_key(req: Request) -> tuple[int, int, int]:
    return (0 if req.priority is Priority.HIGH else 1, req.arrival_us, req.id)


def queue_digest(requests: Sequence[Request]) -> str:
    return hashlib.blake2b(array("q", [r.id for r in requests]).tobytes(), digest_size=8).hexdigest()


def sync_workload(local_queues: Mapping[int, Sequence[Request]], engine_epochs: Mapping[int, int],
                  epoch: int) -> dict[int, tuple[Request, ...]]:
    """Merge per-engine queues into one order and hand every engine the same copy.

    Order is High priority first, then arrival time, then request id.
    """
    stale = sorted(e for e in local_queues if engine_epochs.get(e) != epoch)
    if stale:
        raise EpochSkew(f"engines {stale} are not at epoch {epoch}")
    merged = tuple(sorted((r for q in local_queues.values() for r in q), key=order_key))
    return {e: merged for e in local_queues}


class ControlPlane:
    """Reliable in-order scheduler-to-engine channel with a heartbeat epoch."""

    def __init__(self, engine_ids: Sequence[int]):
        self.epoch = 0
        self.engine_epochs = {e: 0 for e in engine_ids}
        self.sent: list[ControlMessage] = []

    def heartbeat(self) -> ControlMessage:
        self.epoch += 1
        for e in self.engine_epochs:
            self.engine_epochs[e] = self.epoch
        msg = ControlMessage(ControlKind.HEARTBEAT, self.epoch)
        return msg

    def sync(self, local_queues: Mapping[int, Sequence[Request]]) -> tuple[tuple[Request, ...], str]:
        views = sync_workload(local_queues, self.engine_epochs, self.epoch)
        merged = next(iter(views.values())) if views else ()
        digest = queue_digest(merged)
        return merged, digest


def broadcast_mode(engines: Mapping[int, EngineState] | Sequence[EngineState], msg: ControlMessage,
                   pool: GroupPool) -> list[Ack]:
    """Apply SetTP/ResetTP to the addressed engines; every ack carries ``msg.epoch``.

    SetTP addresses the members of ``msg.group`` (which must be in the pool);
    ResetTP addresses ``msg.group`` if given, otherwise every engine.
    """
    if not isinstance(engines, Mapping):
        engines = {e.engine_id: e for e in engines}
    if msg.kind is ControlKind.SET_TP:
        if msg.group is None:
            raise UnknownGroup("SetTP needs a group")
        get_group(pool, msg.group)
        if len(msg.group) != msg.degree:
            raise UnknownGroup(f"group {list(msg.group)} does not have degree {msg.degree}")
        for e in msg.group:
            engines[e].set_tp(msg.group)
        return [Ack(e, msg.epoch) for e in msg.group]
    if msg.kind is ControlKind.RESET_TP:
        targets = msg.group if msg.group is not None else tuple(sorted(engines))
        for e in targets:
            engines[e].reset()
        return [Ack(e, msg.epoch) for e in targets]
    raise ValueError(f"{msg.kind} is not a mode message")
