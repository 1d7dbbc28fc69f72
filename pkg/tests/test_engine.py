import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from faasfabric import errors
from faasfabric.dne import (ConnectionPool, EngineConfig, EngineCost, SchedulerMode,
                            active_qps_have_work)
from faasfabric.fabric import CompletionEntry, Direction, FabricConfig, QpState
from faasfabric.harness.cluster import Cluster, TenantSpec
from faasfabric.iolib import io_get_buffer, io_put_buffer, io_recv, io_send
from faasfabric.mempool import FABRIC, BufferDescriptor

from test_dwrr import reference_dwrr


def manual(tenants=None, engine=None, fabric=None, functions=(), **kw):
    tenants = tenants or {1: TenantSpec(1, 256, 4096)}
    c = Cluster(["A", "B"], tenants, fabric_config=fabric or FabricConfig(),
                default_engine=engine or EngineConfig(), drive=False, **kw)
    for fn_id, tenant, node in functions:
        c.add_function(fn_id, tenant, node)
    c.start()
    return c


def engine_buffer(c, tenant, node, n=64, dst_fn=2):
    eng = c.engines[node]
    pool = c.pools.get(tenant, node)
    d = pool.alloc(eng.owner)
    return pool.write(d, eng.owner, bytes(n)).replace(dst_fn=dst_fn)


def test_idle_iteration_reports_zero():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    rep = c.engines["A"].iteration()
    assert rep.idle and rep.tx_emitted == rep.rx_dispatched == rep.reposted == 0


def test_remote_send_activates_a_queue_pair():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    eng = c.engines["A"]
    assert all(q.state is QpState.INACTIVE for q in eng.conn["B"].all_qps())
    io_send(c.ctx(1), io_get_buffer(c.ctx(1)), 2)
    rep = eng.iteration()
    assert rep.drained == 1 and rep.tx_emitted == 1 and rep.activated == 1
    assert eng.active_qps() == 1


def test_least_congested_choice():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    qps = c.engines["A"].conn["B"].by_tenant[1]
    pool = ConnectionPool("B", active_cap=4)
    for qp, outstanding in zip(qps, (5, 2)):
        qp.state = QpState.ACTIVE
        qp.outstanding = outstanding
        pool.add(qp)
    assert pool.select(1) is qps[1]
    qps[0].outstanding = 2
    assert pool.select(1) is qps[0]  # tie goes to the lower id


def test_no_route_dead_letters_and_keeps_engine_ownership():
    c = manual(functions=[(1, 1, "A")])
    eng = c.engines["A"]
    d = engine_buffer(c, 1, "A", dst_fn=77)
    eng.enqueue(d)
    rep = eng.iteration()
    assert rep.tx_emitted == 1 and rep.dead_lettered == 1
    assert eng.dead_letters[0].reason == "NO_ROUTE"
    assert c.pools.get(1, "A").owner_of(d) == eng.owner
    assert eng.reclaim_dead_letters() == 1


def test_cap_one_saturated_keeps_descriptor_queued():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")],
               engine=EngineConfig(active_cap=1), fabric=FabricConfig(max_outstanding=1))
    eng = c.engines["A"]
    eng.enqueue(engine_buffer(c, 1, "A"))
    eng.enqueue(engine_buffer(c, 1, "A"))
    rep = eng.iteration()
    assert rep.tx_emitted == 1
    assert rep.errors["ACTIVE_CAP_EXCEEDED"] == 1
    assert len(eng.tenants[1].pending_tx) == 1
    assert eng.active_qps() == 1


def test_rx_stage_delivers_and_shrinks_rbr():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    a, b = c.engines["A"], c.engines["B"]
    d = c.ctx(1).write(io_get_buffer(c.ctx(1)), b"xyz")
    io_send(c.ctx(1), d, 2)
    a.iteration()
    c.clock.run(until=c.clock.now + 10**6)
    before = len(b.rbr)
    rep = b.iteration()
    assert rep.rx_dispatched == 1 and len(b.rbr) == before - 1 + rep.reposted
    got = io_recv(c.ctx(2))
    assert bytes(c.ctx(2).read(got)) == b"xyz" and got.src_fn == 1


def test_duplicate_completion_is_rbr_miss():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    b = c.engines["B"]
    wr_id = next(iter(b.rbr))
    # stand in for the fabric: fill the posted buffer and hand it to the engine
    c.pools.get(1, "B").transfer(b.rbr[wr_id], FABRIC, b.owner)
    cqe = CompletionEntry(wr_id, 0, 1, Direction.RX_DONE, 3, header=BufferDescriptor(1, 0, 3, 1, 2))
    b.rx_stage(cqe)
    assert io_recv(c.ctx(2)).dst_fn == 2
    with pytest.raises(errors.RbrMiss):
        b.rx_stage(cqe)


def test_unknown_destination_is_dead_lettered_on_receive():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    a, b = c.engines["A"], c.engines["B"]
    # A believes function 9 lives on B, but B has no such endpoint
    a.routes[9] = "B"
    a.enqueue(engine_buffer(c, 1, "A", dst_fn=9))
    a.iteration()
    c.clock.run(until=c.clock.now + 10**6)
    b.iteration()
    assert [dl.reason for dl in b.dead_letters] == ["UNKNOWN_DST_FN"]


def test_repost_arithmetic_and_exhaustion():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    b = c.engines["B"]
    ts = b.tenants[1]
    ts.cqe_consumed, ts.reposted = 7, 4
    assert b.repost_receive_buffers() == 3
    pool = c.pools.get(1, "B")
    held = pool.alloc_many(b.owner, pool.free_count)
    ts.cqe_consumed += 5
    assert b.repost_receive_buffers() == 0
    assert b.repost_shortfall() == 5
    for d in held[:2]:
        pool.free(d, b.owner)
    assert b.repost_receive_buffers() == 2
    assert b.repost_shortfall() == 3


def run_random_traffic(seed, messages=2000, functions=4, **kw):
    """Random function-to-function messages over two nodes with the event-driven engines."""
    rng = random.Random(seed)
    tenants = {1: TenantSpec(1, 512, 2048), 2: TenantSpec(2, 512, 2048), 3: TenantSpec(3, 512, 2048)}
    c = Cluster(["A", "B"], tenants, **kw)
    fns = {}
    for i in range(functions):
        tenant = 1 + i % 3
        node = "A" if i % 2 == 0 else "B"
        fns[100 + i] = (tenant, node)
        c.add_function(100 + i, tenant, node)
    c.start()
    expected = Counter()
    received = Counter()
    sent = 0
    balance_ok = True
    for engine in c.engines.values():
        orig = engine.iteration

        def checked(orig=orig, engine=engine):
            nonlocal balance_ok
            rep = orig()
            balance_ok &= engine.check_rbr_balance()
            balance_ok &= active_qps_have_work(engine)
            balance_ok &= engine.active_qps() <= engine.config.active_cap * len(engine.conn)
            return rep
        engine.iteration = checked
    while sent < messages:
        src = rng.choice(sorted(fns))
        tenant = fns[src][0]
        peers = [f for f in fns if fns[f][0] == tenant]
        dst = rng.choice(peers)
        ctx = c.ctx(src)
        try:
            d = io_get_buffer(ctx)
        except errors.PoolExhausted:
            c.clock.run(until=c.clock.now + 10**6)
            continue
        d = ctx.write(d, sent.to_bytes(4, "little") + bytes([dst & 0xFF]))
        io_send(ctx, d, dst)
        expected[(dst, sent)] += 1
        sent += 1
        if rng.random() < 0.3:
            c.clock.run(until=c.clock.now + rng.randint(0, 50_000))
        for fn in fns:
            while (got := io_recv(c.ctx(fn))) is not None:
                payload = bytes(c.ctx(fn).read(got))
                assert got.dst_fn == fn and payload[4] == fn & 0xFF
                received[(fn, int.from_bytes(payload[:4], "little"))] += 1
                io_put_buffer(c.ctx(fn), got)
    while True:
        c.run_until_quiet(10**9)
        moved = False
        for fn in fns:
            while (got := io_recv(c.ctx(fn))) is not None:
                payload = bytes(c.ctx(fn).read(got))
                received[(fn, int.from_bytes(payload[:4], "little"))] += 1
                io_put_buffer(c.ctx(fn), got)
                moved = True
        if not moved:
            break
    return c, expected, received, balance_ok


def test_random_routing_oracle():
    c, expected, received, balance_ok = run_random_traffic(7, messages=10_000)
    assert received == expected
    assert balance_ok
    assert c.counters.total_copies == 0 and c.counters.total_violations == 0
    assert c.leaked_buffers() == 0
    for eng in c.engines.values():
        for tid, ts in eng.tenants.items():
            # repost balance at quiescence
            assert ts.reposted + eng.initial_depth[tid] - ts.cqe_consumed == eng.rq_depth(tid)
            assert eng.rq_depth(tid) == eng.initial_depth[tid]
        assert eng.active_qps() == 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
def test_qp_pool_invariants_under_random_load(seed, cap, max_outstanding):
    c, expected, received, balance_ok = run_random_traffic(
        seed, messages=600, functions=6,
        default_engine=EngineConfig(active_cap=cap, qps_per_peer=3),
        fabric_config=FabricConfig(max_outstanding=max_outstanding))
    assert received == expected and balance_ok


def test_burst_activates_up_to_cap():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")],
               engine=EngineConfig(active_cap=4, qps_per_peer=8), fabric=FabricConfig(max_outstanding=2))
    eng = c.engines["A"]
    for _ in range(4):
        eng.enqueue(engine_buffer(c, 1, "A"))
    eng.iteration()
    assert eng.active_qps() == 2
    for _ in range(20):
        eng.enqueue(engine_buffer(c, 1, "A"))
    rep = eng.iteration()
    assert rep.activated == 2 and eng.active_qps() == 4
    assert rep.errors["ACTIVE_CAP_EXCEEDED"] >= 1


def test_drained_queue_pair_goes_inactive_next_iteration():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    eng = c.engines["A"]
    eng.enqueue(engine_buffer(c, 1, "A"))
    eng.iteration()
    assert eng.active_qps() == 1
    c.clock.run(until=c.clock.now + 10**6)  # the ack arrives
    rep = eng.iteration()
    assert rep.tx_completed == 1 and rep.deactivated == 1 and eng.active_qps() == 0


def test_work_conservation():
    c = manual(tenants={1: TenantSpec(1, 256, 4096), 2: TenantSpec(5, 256, 4096)},
               functions=[(1, 1, "A"), (2, 1, "B"), (3, 2, "B")])
    eng = c.engines["A"]
    eng.enqueue(engine_buffer(c, 2, "A", n=4000, dst_fn=3))
    rep = eng.iteration()
    assert rep.tx_emitted >= 1


def _engine_emissions(queues, quantum, scheduler=SchedulerMode.DWRR):
    tenants = {tid: TenantSpec(w, len(ls) + 80, 9000) for tid, w, ls in queues}
    c = Cluster(["A", "B"], tenants,
                default_engine=EngineConfig(quantum_base=quantum, scheduler=scheduler, initial_rq_depth=32,
                                            cost=EngineCost(tx_batch=7)),
                fabric_config=FabricConfig(max_outstanding=10**6))
    for tid, _, _ in queues:
        c.add_function(1000 + tid, tid, "B")
    c.start()
    eng = c.engines["A"]
    eng.emission_log = []
    index = {}
    for tid, _, lengths in queues:
        for i, n in enumerate(lengths):
            d = engine_buffer(c, tid, "A", n=n, dst_fn=1000 + tid)
            index[(tid, d.buffer_id)] = i
            eng.enqueue(d)
    eng.kick()
    c.run_until_quiet(10**10)
    return [(t, index[(t, b)]) for t, b, _ in eng.emission_log]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.lists(st.integers(0, 8000), min_size=1, max_size=60)),
                min_size=1, max_size=4))
def test_engine_emission_sequence_matches_reference(spec):
    queues = [(tid, w, ls) for tid, (w, ls) in enumerate(spec, start=1)]
    assert _engine_emissions(queues, 2048) == reference_dwrr(queues, 2048)


def test_fcfs_engine_follows_arrival_order():
    queues = [(1, 6, [1024] * 30), (2, 1, [1024] * 30)]
    got = _engine_emissions(queues, 2048, SchedulerMode.FCFS)
    assert got == [(1, i) for i in range(30)] + [(2, i) for i in range(30)]


def test_metrics_line_shape():
    c = manual(functions=[(1, 1, "A"), (2, 1, "B")])
    m = c.engines["A"].metrics()
    assert set(m) == {"virtual_time", "node", "tenants", "active_qps"}
    assert set(m["tenants"]["1"]) == {"emitted", "bytes", "rq_depth", "deficit"}
