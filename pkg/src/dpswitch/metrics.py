"""Serving metrics computed from per-request emit times.

Means and medians are taken over exact rationals (times are integer
microseconds) and rounded to float once, so any exact recomputation matches
bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import Priority, Request
from .workload import Phase

WINDOW_US = 1_000_000


def _ms(x: Fraction | int) -> float:
    return float(Fraction(x) / 1000)


def _mean(xs: list) -> Fraction | None:
    return Fraction(sum(xs), len(xs)) if xs else None


def _median(xs: list) -> Fraction | None:
    if not xs:
        return None
    s = sorted(xs)
    k = len(s) // 2
    return Fraction(s[k]) if len(s) % 2 else Fraction(s[k - 1] + s[k], 2)


def p90(xs: list):
    """Nearest-rank 90th percentile."""
    s = sorted(xs)
    return s[math.ceil(0.9 * len(s)) - 1]


def ttft_us(req: Request, emits: list[int]) -> int:
    return emits[0] - req.arrival_us


def tpot_us(emits: list[int]) -> Fraction | None:
    """Mean inter-emit interval after the first token."""
    if len(emits) < 2:
        return None
    return Fraction(emits[-1] - emits[0], len(emits) - 1)


def phase_of(t_us: int, phases: list[Phase]) -> str:
    for ph in phases:
        if ph.start_us <= t_us < ph.end_us:
            return ph.label
    return "all"


def peak_throughput(emits: dict[int, list[int]], window_us: int = WINDOW_US) -> float:
    """Most tokens emitted in any half-open window of ``window_us``, as tokens/s."""
    times = np.sort(np.fromiter((t for ts in emits.values() for t in ts), dtype=np.int64))
    if times.size == 0:
        return 0.0
    ends = np.searchsorted(times, times + window_us, side="left")
    best = int((ends - np.arange(times.size)).max())
    return best * 1_000_000 / window_us


@dataclass
class MetricsSummary:
    ttft_mean_ms: dict[str, float]
    ttft_p90_ms: dict[str, float]
    median_tpot_ms: float
    mean_ilt_ms: float
    peak_throughput_tps: float
    mean_queue_ms: float
    rejected: int
    finished: int
    by_priority: dict[str, dict[str, float]] = field(default_factory=dict)
    end_ms: float = 0.0

    def rows(self) -> list[tuple[float, str, str, float]]:
        out = []
        for label in sorted(self.ttft_mean_ms):
            out.append((self.end_ms, "ttft_mean_ms", label, self.ttft_mean_ms[label]))
            out.append((self.end_ms, "ttft_p90_ms", label, self.ttft_p90_ms[label]))
        out += [(self.end_ms, "median_tpot_ms", "all", self.median_tpot_ms),
                (self.end_ms, "mean_ilt_ms", "all", self.mean_ilt_ms),
                (self.end_ms, "peak_throughput_tps", "all", self.peak_throughput_tps),
                (self.end_ms, "mean_queue_ms", "all", self.mean_queue_ms),
                (self.end_ms, "rejected", "all", float(self.rejected)),
                (self.end_ms, "finished", "all", float(self.finished))]
        for cls in sorted(self.by_priority):
            for k in sorted(self.by_priority[cls]):
                out.append((self.end_ms, k, cls, self.by_priority[cls][k]))
        return out


def summarize(result) -> MetricsSummary:
    """Summary metrics of a :class:`~dpswitch.simulator.SimResult`."""
    emits = result.emits
    rejected = set(result.rejected)
    done = [r for r in result.requests if r.id not in rejected and r.finished_us is not None]
    ttft: dict[str, list[int]] = {"all": []}
    tpots = []
    ilt_sum = ilt_n = 0
    queue = []
    per_cls: dict[str, dict[str, list]] = {}
    for r in done:
        ts = emits[r.id]
        t = ttft_us(r, ts)
        ttft["all"].append(t)
        if result.phases:
            ttft.setdefault(phase_of(r.arrival_us, result.phases), []).append(t)
        tp = tpot_us(ts)
        if tp is not None:
            tpots.append(tp)
            ilt_sum += ts[-1] - ts[0]
            ilt_n += len(ts) - 1
        queue.append(r.admitted_us - r.arrival_us)
        cls = per_cls.setdefault(r.priority.value, {"ttft": [], "tpot": []})
        cls["ttft"].append(t)
        if tp is not None:
            cls["tpot"].append(tp)
    by_priority = {}
    if len(per_cls) > 1 or Priority.HIGH.value in per_cls:
        for name, d in per_cls.items():
            by_priority[name] = {"ttft_mean_ms": _ms(_mean(d["ttft"])),
                                 "tpot_mean_ms": _ms(_mean(d["tpot"])) if d["tpot"] else 0.0}
    nan = float("nan")
    return MetricsSummary(
        ttft_mean_ms={k: _ms(_mean(v)) for k, v in ttft.items() if v},
        ttft_p90_ms={k: _ms(p90(v)) for k, v in ttft.items() if v},
        median_tpot_ms=_ms(_median(tpots)) if tpots else nan,
        mean_ilt_ms=_ms(Fraction(ilt_sum, ilt_n)) if ilt_n else nan,
        peak_throughput_tps=peak_throughput(emits),
        mean_queue_ms=_ms(_mean(queue)) if queue else nan,
        rejected=len(rejected),
        finished=len(done),
        by_priority=by_priority,
        end_ms=result.end_us / 1000,
    )


def time_series(result, bin_us: int = WINDOW_US) -> list[tuple[float, str, str, float]]:
    """Per-bin emitted tokens plus queue depth and in-flight count at each bin start."""
    rejected = set(result.rejected)
    reqs = [r for r in result.requests if r.id not in rejected]
    nbins = result.end_us // bin_us + 1
    tokens = np.zeros(nbins, dtype=np.int64)
    for ts in result.emits.values():
        np.add.at(tokens, np.asarray(ts, dtype=np.int64) // bin_us, 1)
    arr = np.sort(np.array([r.arrival_us for r in reqs], dtype=np.int64))
    adm = np.sort(np.array([r.admitted_us for r in reqs], dtype=np.int64))
    fin = np.sort(np.array([r.finished_us for r in reqs], dtype=np.int64))
    starts = np.arange(nbins, dtype=np.int64) * bin_us
    arrived = np.searchsorted(arr, starts, side="right")
    admitted = np.searchsorted(adm, starts, side="right")
    finished = np.searchsorted(fin, starts, side="right")
    rows = []
    for k in range(nbins):
        t = float(starts[k]) / 1000
        rows.append((t, "throughput_tps", "all", float(tokens[k]) * 1e6 / bin_us))
        rows.append((t, "queue_depth", "all", float(arrived[k] - admitted[k])))
        rows.append((t, "in_flight", "all", float(arrived[k] - finished[k])))
    return rows


def metrics_csv(rows) -> str:
    """``time_ms,metric,label,value`` with rows stable-sorted by (time, metric, label)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_ms", "metric", "label", "value"])
    for t, m, label, v in sorted(rows, key=lambda x: (x[0], x[1], x[2])):
        w.writerow([f"{t:.3f}", m, label, repr(float(v))])
    return buf.getvalue()


def comparison_csv(summaries: dict[str, MetricsSummary]) -> str:
    """One row per (metric, label) with a column per config."""
    labels = list(summaries)
    keyed: dict[tuple[str, str], dict[str, float]] = {}
    for name, s in summaries.items():
        for _, metric, label, v in s.rows():
            keyed.setdefault((metric, label), {})[name] = v
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "label", *labels])
    for key in sorted(keyed):
        w.writerow([*key, *(repr(float(keyed[key].get(n, float("nan")))) for n in labels)])
    return buf.getvalue()
