"""KV cache adaptor over a single fixed-size physical block pool.

Physical blocks never change size. A block holds ``B(p) = p * B_base`` tokens
of a ``1/p`` head slice, so ``B(p) * (kv_width / p) * elem_bytes`` is the same
for every degree and a mode switch only rewrites per-request metadata.

Each engine owns a contiguous partition of block ids. A DP request draws
blocks from its engine only. A TP request's logical block is a *stripe*: one
physical block on each group member, holding that member's slice of the same
``B(p)`` tokens.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field

from .core import DeploymentConfig, ModelSpec, kv_bytes_per_token


class OutOfBlocks(RuntimeError):
    pass


class DoubleAllocate(RuntimeError):
    pass


class UnknownRequest(KeyError):
    pass


class WeightsExceedMemory(ValueError):
    pass


class RemapPolicy(enum.Enum):
    PRESERVE_RESIDENT = "preserve_resident"
    RECOMPUTE = "recompute"


def adapt_block_size(p: int, B_base: int) -> int:
    if p < 1:
        raise ValueError("degree must be >= 1")
    return p * B_base


@dataclass
class LogicalEntry:
    req_id: int
    p: int
    block_capacity: int
    members: tuple[int, ...]
    stripes: list[tuple[int, ...]] = field(default_factory=list)
    tokens_stored: int = 0
    kv_heads: int = 0
    paused: bool = False

    @property
    def block_ids(self) -> list[int]:
        """Logical block ids (the first member's physical block of each stripe)."""
        return [s[0] for s in self.stripes]

    @property
    def num_physical(self) -> int:
        return len(self.stripes) * len(self.members)


@dataclass(frozen=True)
class RemapReport:
    metadata_updates: int
    blocks_copied: int
    tokens_to_recompute: int


class BlockPool:
    """``num_engines * blocks_per_engine`` blocks of ``block_bytes`` each."""

    def __init__(self, num_engines: int, blocks_per_engine: int, block_bytes: int):
        self.num_engines = num_engines
        self.blocks_per_engine = blocks_per_engine
        self.block_bytes = block_bytes
        self.num_blocks = num_engines * blocks_per_engine
        self.realloc_count = 0
        self._free = [list(range(e * blocks_per_engine, (e + 1) * blocks_per_engine))
                      for e in range(num_engines)]

    def owner_engine(self, block_id: int) -> int:
        return block_id // self.blocks_per_engine

    def free_count(self, engine: int | None = None) -> int:
        if engine is None:
            return sum(len(f) for f in self._free)
        return len(self._free[engine])

    def take(self, engine: int) -> int:
        if not self._free[engine]:
            raise OutOfBlocks(f"engine {engine} has no free blocks")
        return heapq.heappop(self._free[engine])

    def give(self, block_id: int) -> None:
        heapq.heappush(self._free[self.owner_engine(block_id)], block_id)

    def free_ids(self) -> set[int]:
        return {b for f in self._free for b in f}


class KVCacheAdaptor:
    """Per-request logical table on top of a :class:`BlockPool`."""

    def __init__(self, spec: ModelSpec, B_base: int, num_engines: int, blocks_per_engine: int):
        self.spec = spec
        self.B_base = B_base
        self.pool = BlockPool(num_engines, blocks_per_engine, B_base * spec.kv_width * spec.elem_bytes)
        self.table: dict[int, LogicalEntry] = {}

    @classmethod
    def for_deployment(cls, spec: ModelSpec, cfg: DeploymentConfig,
                       blocks_per_engine: int | None = None) -> KVCacheAdaptor:
        if blocks_per_engine is None:
            free = cfg.gpu_mem_bytes * cfg.mem_utilization - spec.weight_bytes
            if free <= 0:
                raise WeightsExceedMemory(f"{spec.name} weights do not fit on one device")
            blocks_per_engine = int(free // (cfg.B_base * kv_bytes_per_token(spec)))
        return cls(spec, cfg.B_base, cfg.num_engines, blocks_per_engine)

    @property
    def M_block(self) -> int:
        return self.pool.block_bytes

    def block_bytes(self, p: int) -> int:
        """Bytes of one block interpreted at degree ``p``; equals M_block when
        ``p`` divides the KV width."""
        return adapt_block_size(p, self.B_base) * (self.spec.kv_width // p) * self.spec.elem_bytes

    def blocks_needed(self, tokens: int, p: int) -> int:
        return math.ceil(tokens / adapt_block_size(p, self.B_base))

    def _check_free(self, members: tuple[int, ...], need: dict[int, int]) -> None:
        for e in members:
            if self.pool.free_count(e) < need.get(e, 0):
                raise OutOfBlocks(f"engine {e}: need {need[e]} blocks, "
                                  f"{self.pool.free_count(e)} free")

    def _take_stripes(self, members: tuple[int, ...], k: int) -> list[tuple[int, ...]]:
        self._check_free(members, {e: k for e in members})
        return [tuple(self.pool.take(e) for e in members) for _ in range(k)]

    def allocate(self, req_id: int, tokens_needed: int, p: int,
                 engines: tuple[int, ...] | list[int] = (0,)) -> list[int]:
        """Reserve ``ceil(tokens_needed / B(p))`` logical blocks across ``engines``."""
        engines = tuple(engines)
        if req_id in self.table:
            raise DoubleAllocate(f"request {req_id} already allocated")
        if len(engines) != p:
            raise ValueError(f"degree {p} needs {p} engines, got {engines}")
        k = self.blocks_needed(tokens_needed, p)
        stripes = self._take_stripes(engines, k)
        self.table[req_id] = LogicalEntry(req_id, p, adapt_block_size(p, self.B_base), engines,
                                          stripes, tokens_needed, self.spec.num_kv_heads // p)
        return self.table[req_id].block_ids

    def entry(self, req_id: int) -> LogicalEntry:
        try:
            return self.table[req_id]
        except KeyError:
            raise UnknownRequest(req_id) from None

    def append_tokens(self, req_id: int, n: int = 1) -> list[int]:
        """Grow a request by ``n`` tokens; returns the logical ids of any new blocks."""
        e = self.entry(req_id)
        new: list[tuple[int, ...]] = []
        if e.tokens_stored + n > len(e.stripes) * e.block_capacity:
            k = self.blocks_needed(e.tokens_stored + n, e.p) - len(e.stripes)
            new = self._take_stripes(e.members, k)
            e.stripes.extend(new)
        e.tokens_stored += n
        return [s[0] for s in new]

    def remap_on_switch(self, req_id: int, new_p: int, policy: RemapPolicy,
                        members: tuple[int, ...] | None = None) -> RemapReport:
        """Reinterpret a request's blocks for a mode switch. Never copies.

        PreserveResident keeps the entry's layout and marks it paused while
        ``new_p`` differs from its own degree. Recompute moves the entry to
        ``new_p`` over ``members`` and reports every stored token as needing
        recomputation.
        """
        e = self.entry(req_id)
        if policy is RemapPolicy.PRESERVE_RESIDENT:
            e.paused = new_p != e.p
            return RemapReport(1 if e.tokens_stored else 0, 0, 0)

        members = tuple(members) if members is not None else e.members
        if len(members) != new_p:
            raise ValueError(f"degree {new_p} needs {new_p} members, got {members}")
        k = self.blocks_needed(e.tokens_stored, new_p)
        owned: dict[int, list[int]] = {}
        for stripe in e.stripes:
            for b in stripe:
                owned.setdefault(self.pool.owner_engine(b), []).append(b)
        for blocks in owned.values():
            blocks.sort()
        need = {m: max(0, k - len(owned.get(m, []))) for m in members}
        self._check_free(members, need)
        stripes = []
        for i in range(k):
            stripes.append(tuple(owned[m][i] if i < len(owned.get(m, [])) else self.pool.take(m)
                                 for m in members))
        keep = {b for s in stripes for b in s}
        for blocks in owned.values():
            for b in blocks:
                if b not in keep:
                    self.pool.give(b)
        e.p, e.block_capacity, e.members, e.stripes = new_p, adapt_block_size(new_p, self.B_base), members, stripes
        e.kv_heads = self.spec.num_kv_heads // new_p
        e.paused = False
        stored = e.tokens_stored
        return RemapReport(1 if stored else 0, 0, stored)

    def free(self, req_id: int) -> int:
        e = self.entry(req_id)
        for stripe in e.stripes:
            for b in stripe:
                self.pool.give(b)
        del self.table[req_id]
        return e.num_physical

    def allocated_count(self) -> int:
        return sum(e.num_physical for e in self.table.values())

    def check_conservation(self) -> None:
        allocated = [b for e in self.table.values() for s in e.stripes for b in s]
        free = self.pool.free_ids()
        if len(set(allocated)) != len(allocated):
            raise AssertionError("a block is owned twice")
        if free & set(allocated):
            raise AssertionError("a block is both free and allocated")
        if len(allocated) + self.pool.free_count() != self.pool.num_blocks:
            raise AssertionError("allocated + free != num_blocks")

    def dump(self) -> list[str]:
        """``req_id,p,B(p),tokens_stored,block_ids...``; a TP stripe prints as
        its member blocks joined by ``/``."""
        lines = []
        for rid in sorted(self.table):
            e = self.table[rid]
            ids = ["/".join(map(str, s)) for s in e.stripes]
            lines.append(",".join([str(rid), str(e.p), str(e.block_capacity), str(e.tokens_stored), *ids]))
        return lines


def max_context(spec: ModelSpec, cfg: DeploymentConfig, p: int, dynamic_mode: bool = False) -> int:
    """Longest context one degree-``p`` group can hold, floored to a multiple of ``B(p)``."""
    free = cfg.gpu_mem_bytes * cfg.mem_utilization - spec.weight_bytes / p
    if dynamic_mode:
        free -= cfg.reconfig_reserve_bytes
    if free <= 0:
        raise WeightsExceedMemory(f"{spec.name}: no KV memory left at degree {p}")
    tokens = int(p * free // kv_bytes_per_token(spec))
    b = adapt_block_size(p, cfg.B_base)
    return tokens - tokens % b
