"""Seeded bursty workload generation and the trace file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Mode, Priority, Request, ms_to_us


@dataclass(frozen=True)
class WorkloadSpec:
    """Phases alternate low/high load (starting low), each with a Poisson
    arrival rate drawn uniformly from its range. Lengths are uniform over the
    closed ranges."""

    seed: int = 0
    num_requests: int = 4000
    prompt_range: tuple[int, int] = (128, 4000)
    output_range: tuple[int, int] = (64, 512)
    low_rate: tuple[float, float] = (2.0, 5.0)
    high_rate: tuple[float, float] = (10.0, 30.0)
    phase_durations_ms: tuple[float, float] = (60_000.0, 60_000.0)
    priority_fraction: float = 0.0
    tp_request_fraction: float = 0.0
    tp_hint_degree: int = 4

    def __post_init__(self) -> None:
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        for lo, hi in (self.prompt_range, self.output_range):
            if not 1 <= lo <= hi:
                raise ValueError("token ranges need 1 <= lo <= hi")
        for lo, hi in (self.low_rate, self.high_rate):
            if not 0 < lo <= hi:
                raise ValueError("rate ranges need 0 < lo <= hi")
        if min(self.phase_durations_ms) <= 0:
            raise ValueError("phase durations must be positive")
        for frac in (self.priority_fraction, self.tp_request_fraction):
            if not 0 <= frac <= 1:
                raise ValueError("fractions must lie in [0, 1]")


@dataclass(frozen=True)
class Phase:
    start_us: int
    end_us: int
    label: str
    rate: float


@dataclass
class Trace:
    requests: list[Request]
    phases: list[Phase] = field(default_factory=list)


def phase_label(t_us: int, phase_durations_ms: tuple[float, float]) -> str:
    """Label of the phase containing ``t_us`` for a low-first alternating schedule."""
    low, high = (ms_to_us(d) for d in phase_durations_ms)
    pos = t_us % (low + high)
    return "low" if pos < low else "high"


def generate_trace(spec: WorkloadSpec) -> Trace:
    rng = np.random.default_rng(spec.seed)
    low_us, high_us = (ms_to_us(d) for d in spec.phase_durations_ms)
    requests: list[Request] = []
    phases: list[Phase] = []
    t_phase = 0
    k = 0
    while len(requests) < spec.num_requests:
        label = "low" if k % 2 == 0 else "high"
        lo, hi = spec.low_rate if label == "low" else spec.high_rate
        rate = float(rng.uniform(lo, hi))
        end = t_phase + (low_us if label == "low" else high_us)
        phases.append(Phase(t_phase, end, label, rate))
        t = float(t_phase)
        while len(requests) < spec.num_requests:
            # memoryless: restarting at the boundary with the next rate is exact
            t += rng.exponential(1e6 / rate)
            if t >= end:
                break
            requests.append(_sample_request(rng, spec, len(requests), int(t)))
        t_phase = end
        k += 1
    return Trace(requests, phases)


def _sample_request(rng: np.random.Generator, spec: WorkloadSpec, rid: int, t_us: int) -> Request:
    prompt = int(rng.integers(spec.prompt_range[0], spec.prompt_range[1] + 1))
    output = int(rng.integers(spec.output_range[0], spec.output_range[1] + 1))
    high = bool(rng.random() < spec.priority_fraction)
    tp = bool(rng.random() < spec.tp_request_fraction)
    mode = Mode(spec.tp_hint_degree) if (high or tp) else Mode(1)
    return Request(rid, t_us, prompt, output, Priority.HIGH if high else Priority.NORMAL, mode)


def format_trace(requests: list[Request]) -> str:
    """One request per line: ``id,arrival_ms,prompt_tokens,output_tokens,priority,mode_hint``."""
    lines = [f"{r.id},{r.arrival_us / 1000:.3f},{r.prompt_tokens},{r.output_tokens},"
             f"{r.priority.value},{r.mode if r.mode is not None else 'auto'}"
             for r in requests]
    return "".join(line + "\n" for line in lines)


def write_trace(requests: list[Request], path: str | Path) -> None:
    Path(path).write_text(format_trace(requests))


def parse_trace(text: str) -> list[Request]:
    requests = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ValueError(f"line {n}: expected 6 fields, got {len(parts)}")
        rid, arrival, prompt, output, prio, hint = parts
        arrival_ms = float(arrival)
        if not math.isfinite(arrival_ms) or arrival_ms < 0:
            raise ValueError(f"line {n}: bad arrival time {arrival!r}")
        requests.append(Request(int(rid), ms_to_us(arrival_ms), int(prompt), int(output),
                                Priority(prio.strip().lower()), Mode.parse(hint)))
    return requests


def read_trace(path: str | Path) -> list[Request]:
    return parse_trace(Path(path).read_text())


def phases_for(phase_durations_ms: tuple[float, float], until_us: int) -> list[Phase]:
    """Alternating low/high phases covering ``[0, until_us]``; rates are unknown (nan)."""
    low, high = (ms_to_us(d) for d in phase_durations_ms)
    out, t, k = [], 0, 0
    while t <= until_us:
        span = low if k % 2 == 0 else high
        out.append(Phase(t, t + span, "low" if k % 2 == 0 else "high", float("nan")))
        t += span
        k += 1
    return out
