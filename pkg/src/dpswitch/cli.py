"""Command-line front end: gen, run, compare, capacity."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .comms import MismatchFault, format_collective_log
from .core import ConfigError, DeploymentConfig, get_preset, load_config, validate_deployment
from .costmodel import COLD_START_MS, CostModel
from .kvcache import WeightsExceedMemory, max_context
from .metrics import comparison_csv, metrics_csv, summarize, time_series
from .scheduler import LoadAdaptive, ModeFromRequest, Strategy, format_decision_log
from .simulator import RunConfig, SimConfig, compare_configs, policy_for, run_simulation
from .workload import WorkloadSpec, format_trace, generate_trace, phases_for, read_trace

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 2, 3


class UsageError(Exception):
    pass


def _pair(text: str, cast=float) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _degrees(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _config(path: str | None) -> DeploymentConfig:
    if path is None:
        return DeploymentConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _trace(path: str, phases: tuple[float, float]):
    if not Path(path).is_file():
        raise UsageError(f"trace file not found: {path}")
    from .workload import Trace

    reqs = read_trace(path)
    if not reqs:
        raise UsageError(f"trace file is empty: {path}")
    last = max(r.arrival_us for r in reqs)
    return Trace(reqs, phases_for(phases, last))


def _policy(name: str, tp_degree: int, low: float, high: float):
    if name == "dynamic":
        return LoadAdaptive(low_rps=low, high_rps=high, degree=tp_degree)
    if name == "from_request":
        return ModeFromRequest()
    return policy_for(name, tp_degree)


def cmd_gen(args) -> int:
    if args.requests < 1:
        raise UsageError("--requests must be >= 1")
    spec = WorkloadSpec(seed=args.seed, num_requests=args.requests,
                        prompt_range=args.prompt_range, output_range=args.output_range,
                        low_rate=args.low_rate, high_rate=args.high_rate,
                        phase_durations_ms=args.phases, priority_fraction=args.priority_fraction,
                        tp_request_fraction=args.tp_fraction, tp_hint_degree=args.tp_degree)
    text = format_trace(generate_trace(spec).requests)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _sim(args) -> SimConfig:
    return SimConfig(spec=get_preset(args.model), max_batch=args.max_batch,
                     chunk_tokens=args.chunk_tokens)


def cmd_run(args) -> int:
    cfg = _config(args.config)
    trace = _trace(args.trace, args.phases)
    sim = _sim(args)
    validate_deployment(sim.spec, cfg)
    policy = _policy(args.policy, args.tp_degree, args.low_rps, args.high_rps)
    result = run_simulation(trace, cfg, Strategy.parse(args.strategy), policy,
                            CostModel(switch_latency_ms=cfg.switch_latency_ms), sim)
    summary = summarize(result)
    rows = summary.rows() + time_series(result)
    if args.out:
        Path(args.out).write_text(metrics_csv(rows))
    if args.log:
        Path(args.log).write_text("\n".join(format_decision_log(result.decision_log)) + "\n")
    if args.collective_log:
        Path(args.collective_log).write_text(
            "\n".join(format_collective_log(result.collective_log)) + "\n")
    _print_summary(summary)
    return EXIT_OK


def _print_summary(s) -> None:
    for label in sorted(s.ttft_mean_ms):
        print(f"ttft[{label}]  mean {s.ttft_mean_ms[label]:.1f} ms  p90 {s.ttft_p90_ms[label]:.1f} ms")
    print(f"median TPOT      {s.median_tpot_ms:.2f} ms/token")
    print(f"mean ILT         {s.mean_ilt_ms:.2f} ms/token")
    print(f"peak throughput  {s.peak_throughput_tps:.0f} tokens/s")
    print(f"mean queue time  {s.mean_queue_ms:.1f} ms")
    print(f"rejected         {s.rejected}")
    for cls in sorted(s.by_priority):
        d = s.by_priority[cls]
        print(f"priority={cls:<6}  TTFT {d['ttft_mean_ms']:.1f} ms  TPOT {d['tpot_mean_ms']:.2f} ms")


def cmd_compare(args) -> int:
    if len(args.labels) < 2:
        raise UsageError("compare needs at least two labels")
    cfg = _config(args.config)
    trace = _trace(args.trace, args.phases)
    sim = _sim(args)
    validate_deployment(sim.spec, cfg)
    strategy = Strategy.parse(args.strategy)
    legs = [RunConfig(label, label, strategy,
                      _policy(label, args.tp_degree, args.low_rps, args.high_rps))
            for label in dict.fromkeys(args.labels)]
    if len(legs) < 2:
        # the same label twice is a determinism check: run it twice under distinct names
        legs = [RunConfig(f"{args.labels[0]}#{i}", legs[0].mode, strategy, legs[0].policy)
                for i in range(len(args.labels))]
    results = compare_configs(trace, legs, cfg, CostModel(switch_latency_ms=cfg.switch_latency_ms), sim)
    text = comparison_csv({k: summarize(v) for k, v in results.items()})
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def capacity_rows(model: str, cfg: DeploymentConfig, degrees: tuple[int, ...],
                  dynamic: bool, cost: CostModel | None = None) -> list[tuple]:
    """``(layout, degree, max_context_tokens, switch_ms, switch_kind)`` rows."""
    spec = get_preset(model)
    cost = cost or CostModel(switch_latency_ms=cfg.switch_latency_ms)
    rows = []
    for p in degrees:
        try:
            tokens = max_context(spec, cfg, p)
        except WeightsExceedMemory:
            tokens = 0
        cold = cost.cold_start_presets.get(p, cost.cold_start_ms)
        rows.append((f"{cfg.num_engines // p}DPx{p}TP", p, tokens, cold, "cold_start"))
    if dynamic:
        p = max(degrees)
        rows.append(("dynamic", p, max_context(spec, cfg, p, dynamic_mode=True),
                     cost.switch_latency_ms, "live"))
    return rows


def cmd_capacity(args) -> int:
    cfg = _config(args.config)
    degrees = args.degrees or cfg.supported_tp_degrees
    for p in degrees:
        if p < 1 or cfg.num_engines % p:
            raise ConfigError(["IndivisibleTPDegree"], [f"{p} does not divide {cfg.num_engines}"])
    rows = capacity_rows(args.model, cfg, degrees, args.dynamic)
    lines = ["layout,degree,max_context_tokens,switch_ms,switch_kind"]
    lines += [f"{a},{p},{t},{ms:.2f},{kind}" for a, p, t, ms, kind in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.dynamic:
        cost = CostModel(switch_latency_ms=cfg.switch_latency_ms)
        live = rows[-1][3]
        print(f"# live/cold-start ratio: {cost.cold_start_ms / live:.0f}x default, "
              f"{min(COLD_START_MS.values()) / live:.0f}x-{max(COLD_START_MS.values()) / live:.0f}x "
              "over per-degree presets", file=sys.stderr)
    return EXIT_OK


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("trace")
    p.add_argument("--config", help="JSON deployment config")
    p.add_argument("--model", default="llama-70b-fp8")
    p.add_argument("--strategy", default="soft_preempt",
                   choices=[s.value for s in Strategy])
    p.add_argument("--tp-degree", type=int, default=4)
    p.add_argument("--low-rps", type=float, default=LoadAdaptive.low_rps)
    p.add_argument("--high-rps", type=float, default=LoadAdaptive.high_rps)
    p.add_argument("--phases", type=_pair, default=WorkloadSpec.phase_durations_ms,
                   help="low_ms,high_ms used to label phases")
    p.add_argument("--max-batch", type=int, default=SimConfig.max_batch)
    p.add_argument("--chunk-tokens", type=int, default=SimConfig.chunk_tokens)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpswitch", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a bursty trace")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--requests", type=int, default=4000)
    g.add_argument("--prompt-range", type=lambda s: _pair(s, int), default=(128, 4000))
    g.add_argument("--output-range", type=lambda s: _pair(s, int), default=(64, 512))
    g.add_argument("--low-rate", type=_pair, default=(2.0, 5.0))
    g.add_argument("--high-rate", type=_pair, default=(10.0, 30.0))
    g.add_argument("--phases", type=_pair, default=WorkloadSpec.phase_durations_ms)
    g.add_argument("--priority-fraction", type=float, default=0.0)
    g.add_argument("--tp-fraction", type=float, default=0.0)
    g.add_argument("--tp-degree", type=int, default=4)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="simulate one configuration")
    _add_sim_flags(r)
    r.add_argument("--policy", default="dynamic",
                   choices=["dynamic", "static_dp", "static_tp", "from_request"])
    r.add_argument("--log", help="write the decision log here")
    r.add_argument("--collective-log", help="write the collective log here")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="simulate several configurations on one trace")
    _add_sim_flags(c)
    c.add_argument("labels", nargs="+", choices=["static_dp", "static_tp", "dynamic"])
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("capacity", help="max context per layout and switch cost")
    k.add_argument("--model", default="llama-70b")
    k.add_argument("--config")
    k.add_argument("--degrees", type=_degrees)
    k.add_argument("--dynamic", action="store_true")
    k.add_argument("--out")
    k.set_defaults(func=cmd_capacity)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {', '.join(exc.violations)}", file=sys.stderr)
        for d in exc.details:
            print(f"  {d}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MismatchFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
