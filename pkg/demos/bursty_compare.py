"""Static DP, static TP and load-adaptive switching on one bursty trace.

    python demos/bursty_compare.py --requests 4000
"""

from __future__ import annotations

import argparse

from dpswitch import LoadAdaptive, StaticMode, WorkloadSpec, generate_trace, run_simulation, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--requests", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--phases", default="180000,15000", help="low_ms,high_ms")
    args = ap.parse_args()

    low, high = (float(x) for x in args.phases.split(","))
    trace = generate_trace(WorkloadSpec(seed=args.seed, num_requests=args.requests,
                                        phase_durations_ms=(low, high)))
    runs = {"static_dp": StaticMode(1), "static_tp": StaticMode(4), "dynamic": LoadAdaptive()}
    out = {k: summarize(run_simulation(trace, policy=p)) for k, p in runs.items()}

    print(f"{'':10s} {'peak tok/s':>10s} {'TTFT low':>9s} {'P90 high':>9s} {'TPOT':>6s}")
    for k, s in out.items():
        print(f"{k:10s} {s.peak_throughput_tps:10.0f} {s.ttft_mean_ms['low']:9.0f} "
              f"{s.ttft_p90_ms['high']:9.0f} {s.median_tpot_ms:6.1f}")


if __name__ == "__main__":
    main()
