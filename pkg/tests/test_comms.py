import random

import numpy as np
import pytest

from dpswitch.comms import (ControlKind, ControlMessage, ControlPlane, EpochSkew,
                            IndivisibleTPDegree, MismatchFault, UnknownGroup, all_reduce,
                            broadcast_mode, build_pool, enumerate_tp_groups,
                            format_collective_log, get_group, queue_digest, sync_workload)
from dpswitch.core import EngineState, Priority, Request


def test_enumerate_examples():
    assert enumerate_tp_groups(4, [2, 4]) == [(0, 1), (2, 3), (0, 1, 2, 3)]
    assert len(enumerate_tp_groups(8, [2, 4, 8])) == 7
    assert enumerate_tp_groups(2, []) == []
    with pytest.raises(IndivisibleTPDegree):
        enumerate_tp_groups(4, [3])


def test_pool_membership_is_exact():
    groups = enumerate_tp_groups(8, [2, 4, 8])
    pool = build_pool(groups)
    import itertools
    for k in (2, 4, 8):
        for combo in itertools.combinations(range(8), k):
            if combo in groups:
                assert get_group(pool, combo).members == combo
            else:
                with pytest.raises(UnknownGroup):
                    get_group(pool, combo)
    assert pool.construction_count == 7


def test_pool_costs():
    pool = build_pool(enumerate_tp_groups(4, [2, 4]))
    assert pool.host_mem_bytes == 6_000_000
    assert build_pool([]).startup_cost_ms == 0
    assert build_pool(enumerate_tp_groups(8, [2, 4, 8]), init_cost_ms=500).startup_cost_ms == 3500


def test_get_group_n4():
    pool = build_pool(enumerate_tp_groups(4, [2, 4]))
    get_group(pool, [0, 1])
    get_group(pool, [0, 1, 2, 3])
    with pytest.raises(UnknownGroup):
        get_group(pool, [1, 2])


def test_all_reduce_sums():
    pool = build_pool([(0, 1)])
    h = get_group(pool, (0, 1))
    assert all_reduce(h, 0, np.array([1.0, 2.0])) is None
    out = all_reduce(h, 1, np.array([10.0, 20.0]))
    assert out.tolist() == [11.0, 22.0]
    assert h.results[0].tolist() == [11.0, 22.0]
    assert format_collective_log(pool.log) == ["0.000,0-1,all_reduce,0,ok"]


def test_single_member_identity():
    pool = build_pool([(3,)])
    assert all_reduce(get_group(pool, (3,)), 3, np.array([5.0])).tolist() == [5.0]


def test_seq_mismatch_faults():
    pool = build_pool([(0, 1)])
    h = get_group(pool, (0, 1))
    h.seq = 5
    all_reduce(h, 0, 1, seq=5)
    with pytest.raises(MismatchFault):
        all_reduce(h, 1, 1, seq=6)
    assert pool.log[-1][-1] == "mismatch"


def test_non_member_faults():
    h = get_group(build_pool([(0, 1)]), (0, 1))
    with pytest.raises(MismatchFault):
        all_reduce(h, 2, 1)


def req(i, t, prio=Priority.NORMAL):
    return Request(i, t, 1, 1, prio)


def test_sync_order():
    a, b = req(0, 10), req(1, 5)
    views = sync_workload({0: [a], 1: [b]}, {0: 3, 1: 3}, 3)
    assert [r.id for r in views[0]] == [1, 0] and views[0] == views[1]


def test_sync_high_first_and_identical():
    qs = {e: [req(4 * e + k, k * 7 % 5, Priority.HIGH if k == 3 else Priority.NORMAL)
              for k in range(4)] for e in range(4)}
    views = sync_workload(qs, {e: 1 for e in range(4)}, 1)
    digests = {queue_digest(v) for v in views.values()}
    assert len(digests) == 1
    merged = views[0]
    assert all(r.priority is Priority.HIGH for r in merged[:4])


def test_sync_epoch_skew():
    with pytest.raises(EpochSkew):
        sync_workload({0: [], 1: []}, {0: 2, 1: 1}, 2)


def test_control_plane_heartbeat():
    cp = ControlPlane(range(4))
    cp.heartbeat()
    merged, digest = cp.sync({0: [req(1, 0)], 1: []})
    assert [r.id for r in merged] == [1] and digest == queue_digest(merged)


def test_broadcast_set_and_reset():
    pool = build_pool(enumerate_tp_groups(4, [2, 4]))
    engines = [EngineState(i) for i in range(4)]
    acks = broadcast_mode(engines, ControlMessage(ControlKind.SET_TP, 7, 2, (0, 1)), pool)
    assert {a.epoch for a in acks} == {7} and [a.engine_id for a in acks] == [0, 1]
    assert engines[0].group == (0, 1) and not engines[2].is_tp
    acks = broadcast_mode(engines, ControlMessage(ControlKind.RESET_TP, 8, 1, (2,)), pool)
    assert acks[0].epoch == 8 and not engines[2].is_tp
    with pytest.raises(UnknownGroup):
        broadcast_mode(engines, ControlMessage(ControlKind.SET_TP, 9, 2, (1, 2)), pool)


def test_random_legal_switching_never_faults():
    """Random legal SetTP/ResetTP sequences with lockstep collectives on every live group."""
    rnd = random.Random(3)
    groups = enumerate_tp_groups(8, [2, 4, 8])
    pool = build_pool(groups)
    engines = {i: EngineState(i) for i in range(8)}
    epoch = 0
    for _ in range(5_000):
        live = {e.group for e in engines.values() if e.is_tp}
        if rnd.random() < 0.3:
            epoch += 1
            free = [g for g in groups if all(not engines[m].is_tp for m in g)]
            if free and rnd.random() < 0.6:
                g = rnd.choice(free)
                acks = broadcast_mode(engines, ControlMessage(ControlKind.SET_TP, epoch, len(g), g), pool)
            elif live:
                g = rnd.choice(sorted(live))
                acks = broadcast_mode(engines, ControlMessage(ControlKind.RESET_TP, epoch, 1, g), pool)
            else:
                continue
            assert {a.epoch for a in acks} == {epoch}
        for g in live:
            h = get_group(pool, g)
            for m in g:
                all_reduce(h, m, 64)
            assert not h.pending
    assert pool.construction_count == 7
    assert all(row[-1] == "ok" for row in pool.log)
