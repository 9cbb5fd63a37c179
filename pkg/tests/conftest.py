from __future__ import annotations

import random

import pytest

from dpswitch.core import DP, Mode, Priority, Request, ms_to_us
from dpswitch.scheduler import Scheduler
from dpswitch.simulator import SimConfig

# a small block pool keeps per-run setup cheap without changing behaviour
SMALL = SimConfig(blocks_per_engine=512)


def random_requests(rng: random.Random, n: int, *, horizon_ms: float = 400.0,
                    hints=(1, 2, 4, 8), high_frac: float = 0.2,
                    prompt=(1, 300), output=(1, 30)) -> list[Request]:
    out = []
    for i in range(n):
        high = rng.random() < high_frac
        out.append(Request(i, ms_to_us(round(rng.uniform(0, horizon_ms), 3)),
                           rng.randint(*prompt), rng.randint(*output),
                           Priority.HIGH if high else Priority.NORMAL, Mode(rng.choice(hints))))
    return out


@pytest.fixture
def rng():
    return random.Random(1234)


def serial_replay_case(seed):
    rnd = random.Random(seed)
    base = [Request(i, ms_to_us(round(rnd.uniform(0, 50), 3)), rnd.randint(100, 2000),
                    rnd.randint(20, 200), mode=DP) for i in range(rnd.randint(2, 12))]
    high = Request(len(base), ms_to_us(round(rnd.uniform(200, 3000), 3)), rnd.randint(100, 2000),
                   rnd.randint(5, 100), Priority.HIGH, Mode(rnd.choice([2, 4, 8])))
    return base, high


def hosts_of(monkeypatch):
    hosts = {}
    orig = Scheduler._admit

    def spy(self, req, members, mode, now, *a, **k):
        hosts[req.id] = members
        return orig(self, req, members, mode, now, *a, **k)

    monkeypatch.setattr(Scheduler, "_admit", spy)
    return hosts


# one pass/fail line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, bool, float]] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` registers the test as acceptance criterion ``n``."""
    def register(n: int, title: str) -> None:
        request.node.criterion = (n, title)
    return register


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    tag = getattr(item, "criterion", None)
    if tag is None:
        return
    n, title = tag
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _CRITERIA[n] = (title, rep.passed, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, dur = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  ({dur:.1f}s)")
