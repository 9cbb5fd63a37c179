"""Priority requests under sustained load: hard preemption vs. a static TP layout."""

from __future__ import annotations

import argparse

from dpswitch import (ModeFromRequest, StaticMode, Strategy, WorkloadSpec, generate_trace,
                      run_simulation, summarize)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--requests", type=int, default=600)
    ap.add_argument("--priority-fraction", type=float, default=0.05)
    args = ap.parse_args()

    trace = generate_trace(WorkloadSpec(seed=3, num_requests=args.requests, low_rate=(3.0, 5.0),
                                        high_rate=(3.0, 5.0), output_range=(512, 1536),
                                        priority_fraction=args.priority_fraction,
                                        tp_hint_degree=2))
    for name, strategy, policy in (("static 2DPx4TP", Strategy.SEQUENTIAL, StaticMode(4)),
                                   ("hard preempt", Strategy.HARD_PREEMPT, ModeFromRequest()),
                                   ("soft preempt", Strategy.SOFT_PREEMPT, ModeFromRequest())):
        res = run_simulation(trace, strategy=strategy, policy=policy)
        s = summarize(res)
        pauses = sum(1 for row in res.decision_log if row[2] == "Pause")
        print(f"{name:15s} all {s.ttft_mean_ms['all']:8.0f} ms   "
              f"priority {s.by_priority['high']['ttft_mean_ms']:6.0f} ms   pauses {pauses}")


if __name__ == "__main__":
    main()
