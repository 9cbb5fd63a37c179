import pytest

from dpswitch.core import Priority
from dpswitch.workload import (WorkloadSpec, format_trace, generate_trace, parse_trace,
                               phase_label, phases_for, write_trace)


def test_ranges_and_count():
    tr = generate_trace(WorkloadSpec(seed=1))
    assert len(tr.requests) == 4000
    assert all(128 <= r.prompt_tokens <= 4000 for r in tr.requests)
    assert all(64 <= r.output_tokens <= 512 for r in tr.requests)
    times = [r.arrival_us for r in tr.requests]
    assert times == sorted(times)


def test_phases_alternate_with_rates():
    tr = generate_trace(WorkloadSpec(seed=2, num_requests=2000))
    labels = [p.label for p in tr.phases]
    assert labels[:4] == ["low", "high", "low", "high"]
    for p in tr.phases:
        lo, hi = (2, 5) if p.label == "low" else (10, 30)
        assert lo <= p.rate <= hi
    assert phase_label(tr.phases[1].start_us, (60_000, 60_000)) == "high"


def test_trace_files_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace(generate_trace(WorkloadSpec(seed=1, num_requests=300)).requests, a)
    write_trace(generate_trace(WorkloadSpec(seed=1, num_requests=300)).requests, b)
    assert a.read_bytes() == b.read_bytes()


def test_empirical_rate():
    spec = WorkloadSpec(seed=4, num_requests=100_000, low_rate=(20, 20), high_rate=(20, 20),
                        phase_durations_ms=(1e7, 1e7))
    reqs = generate_trace(spec).requests
    rate = len(reqs) / (reqs[-1].arrival_us / 1e6)
    assert abs(rate - 20) <= 0.5


def test_priority_and_hints():
    tr = generate_trace(WorkloadSpec(seed=3, num_requests=2000, priority_fraction=0.25,
                                     tp_request_fraction=0.1, tp_hint_degree=2))
    high = [r for r in tr.requests if r.priority is Priority.HIGH]
    assert 0.2 < len(high) / 2000 < 0.3
    assert all(r.mode.degree == 2 for r in high)


def test_roundtrip():
    reqs = generate_trace(WorkloadSpec(seed=5, num_requests=50, priority_fraction=0.5)).requests
    text = format_trace(reqs)
    back = parse_trace(text)
    assert format_trace(back) == text
    assert text.splitlines()[0].count(",") == 5


@pytest.mark.parametrize("line", ["1,2,3", "0,-1,5,5,normal,dp", "0,1,5,5,urgent,dp",
                                  "0,1,5,5,normal,pp2"])
def test_bad_lines(line):
    with pytest.raises(ValueError):
        parse_trace(line + "\n")


def test_bad_specs():
    with pytest.raises(ValueError):
        WorkloadSpec(num_requests=0)
    with pytest.raises(ValueError):
        WorkloadSpec(priority_fraction=1.5)


def test_phases_for_cover():
    ph = phases_for((1000, 500), 3_100_000)
    assert [p.label for p in ph] == ["low", "high", "low", "high", "low"]
    assert ph[-1].end_us > 3_100_000
