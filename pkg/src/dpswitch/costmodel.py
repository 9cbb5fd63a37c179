"""Parametric step-time model for prefill, decode and TP communication.

Absolute milliseconds are a calibration surface, not measurements. Defaults
put a batch-1 decode step at degree 4 at ``1/2.31`` of the DP step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Prefill:
    tokens: int


@dataclass(frozen=True)
class Decode:
    batch: int
    contexts: tuple[int, ...] = ()


# Cold restarts from a static layout, per target TP degree (ms).
COLD_START_MS = {2: 292_380.0, 4: 211_970.0, 8: 146_540.0}


@dataclass(frozen=True)
class CostModel:
    prefill_tokens_per_ms_per_engine: float = 8.0
    decode_ms_per_token_dp: float = 30.0
    decode_ms_per_extra_seq: float = 0.25
    comm_ms_per_doubling: float = 0.5
    prefill_efficiency_loss: float = 0.1
    decode_scaling_exponent: float = 0.6614
    batch_scaling_exponent: float = 0.3
    switch_latency_ms: float = 15.0
    cold_start_ms: float = 150_000.0
    cold_start_presets: dict[int, float] = field(default_factory=lambda: dict(COLD_START_MS))

    def tp_comm_overhead(self, p: int) -> float:
        return 0.0 if p <= 1 else self.comm_ms_per_doubling * math.log2(p)

    def tp_prefill_speedup(self, p: int) -> float:
        """Per-engine prefill efficiency at degree ``p``, in ``(1/p, 1]``."""
        return 1.0 / (1.0 + self.prefill_efficiency_loss * math.log2(p))

    def tp_decode_speedup(self, p: int) -> float:
        """Multiplier on the batch-1 decode step at degree ``p``."""
        return p ** -self.decode_scaling_exponent

    def tp_batch_speedup(self, p: int) -> float:
        # per-sequence work shards poorly: small per-device GEMMs, launch overheads
        return p ** -self.batch_scaling_exponent

    def prefill_ms(self, tokens: int, p: int) -> float:
        if tokens <= 0:
            return 0.0
        return tokens / (self.prefill_tokens_per_ms_per_engine * p * self.tp_prefill_speedup(p))

    def decode_ms(self, batch: int, p: int) -> float:
        if batch <= 0:
            return 0.0
        return (self.decode_ms_per_token_dp * self.tp_decode_speedup(p)
                + self.decode_ms_per_extra_seq * (batch - 1) * self.tp_batch_speedup(p))

    def mixed_step_ms(self, prefill_tokens: int, decode_batch: int, p: int) -> float:
        """One continuous-batching step: a prefill chunk plus a decode batch,
        with a single communication term when ``p > 1``."""
        if prefill_tokens <= 0 and decode_batch <= 0:
            return 0.0
        return (self.prefill_ms(prefill_tokens, p) + self.decode_ms(decode_batch, p)
                + self.tp_comm_overhead(p))


def step_time(cost: CostModel, phase: Prefill | Decode, p: int) -> float:
    if p < 1:
        raise ValueError("degree must be >= 1")
    if isinstance(phase, Prefill):
        return cost.mixed_step_ms(phase.tokens, 0, p)
    return cost.mixed_step_ms(0, phase.batch, p)
