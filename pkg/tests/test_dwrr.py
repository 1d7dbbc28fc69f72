from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from faasfabric.dne import DwrrScheduler, FcfsScheduler, TenantState, dwrr_schedule
from faasfabric.mempool import BufferDescriptor


def reference_dwrr(queues, quantum_base=2048):
    """Plain round-by-round deficit round robin, written from the textbook
    description: every round visits tenants in id order, grants a quantum to each
    backlogged one, emits while the deficit covers the head, resets on empty."""
    queues = {tid: (w, list(lengths)) for tid, w, lengths in queues}
    heads = {tid: 0 for tid in queues}
    deficit = {tid: 0 for tid in queues}
    out = []
    while any(heads[t] < len(queues[t][1]) for t in queues):
        for tid in sorted(queues):
            weight, lengths = queues[tid]
            if heads[tid] >= len(lengths):
                deficit[tid] = 0
                continue
            deficit[tid] += weight * quantum_base
            while heads[tid] < len(lengths) and deficit[tid] >= max(lengths[heads[tid]], 1):
                deficit[tid] -= max(lengths[heads[tid]], 1)
                out.append((tid, heads[tid]))
                heads[tid] += 1
            if heads[tid] >= len(lengths):
                deficit[tid] = 0
    return out


def test_single_tenant_gets_everything():
    out = dwrr_schedule([(1, 3, [1024] * 50)])
    assert [t for t, _ in out] == [1] * 50


def test_weighted_shares_uniform_sizes():
    # 10^4 rounds: each round emits 12 + 2 + 4 messages of 1 KB with quantum 2 KB
    rounds = 10_000
    queues = [(1, 6, [1024] * (12 * rounds)), (2, 1, [1024] * (2 * rounds)), (3, 2, [1024] * (4 * rounds))]
    out = dwrr_schedule(queues, 2048, limit=18 * rounds)
    shares = Counter(t for t, _ in out)
    total = sum(shares.values())
    for tid, expected in ((1, 6 / 9), (2, 1 / 9), (3, 2 / 9)):
        assert abs(shares[tid] / total - expected) <= 0.01 * expected


def test_six_to_one_per_window():
    out = dwrr_schedule([(1, 6, [1024] * 60_000), (2, 1, [1024] * 10_000)], 2048, limit=35_000)
    for start in range(0, 35_000, 3_500):
        window = Counter(t for t, _ in out[start:start + 3_500])
        assert abs(window[1] / window[2] - 6) <= 0.05 * 6


@settings(max_examples=200, deadline=None)
@given(st.lists(
    st.tuples(st.integers(1, 8), st.lists(st.integers(0, 9000), max_size=80)),
    min_size=1, max_size=5),
    st.sampled_from([512, 1024, 2048, 4096]))
def test_matches_reference_emission_by_emission(spec, quantum):
    queues = [(tid, w, lengths) for tid, (w, lengths) in enumerate(spec, start=1)]
    assert dwrr_schedule(queues, quantum) == reference_dwrr(queues, quantum)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=2, max_size=6))
def test_long_run_shares_converge_to_weights(weights):
    n = 3_000
    queues = [(i, w, [700] * (n * w)) for i, w in enumerate(weights, start=1)]
    out = dwrr_schedule(queues, 2048, limit=n)
    counts = Counter(t for t, _ in out)
    total = sum(weights)
    for tid, w in enumerate(weights, start=1):
        assert abs(counts[tid] / n - w / total) <= 0.05 * (w / total) + 2 / n * w


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.lists(st.integers(1, 8192), min_size=1, max_size=40)),
                min_size=1, max_size=4))
def test_starvation_bound(spec):
    """Between two emissions a backlogged tenant receives at most
    ceil(max_len / (weight * quantum)) quanta, so no head waits unboundedly."""
    quantum = 2048
    tenants = {}
    for tid, (w, lengths) in enumerate(spec, start=1):
        ts = tenants[tid] = TenantState(tid, w)
        ts.pending_tx.extend(BufferDescriptor(tid, i, n) for i, n in enumerate(lengths))
    max_len = max(n for _, ls in spec for n in ls)
    sched = DwrrScheduler(tenants, quantum)
    grants = Counter()
    while True:
        before = {t: ts.deficit for t, ts in tenants.items()}
        pick = sched.peek()
        if pick is None:
            break
        for t, ts in tenants.items():
            if ts.deficit > before[t]:
                grants[t] += (ts.deficit - before[t]) // (ts.weight * quantum)
        ts, _ = pick
        assert grants[ts.tenant_id] <= -(-max_len // (ts.weight * quantum))
        grants[ts.tenant_id] = 0
        sched.commit(ts)
    assert all(not ts.pending_tx for ts in tenants.values())


def test_deficit_resets_when_idle_and_carries_residual():
    ts = {1: TenantState(1, 1), 2: TenantState(2, 1)}
    sched = DwrrScheduler(ts, 1000)
    ts[1].pending_tx.extend([BufferDescriptor(1, 0, 600), BufferDescriptor(1, 1, 600)])
    ts[2].pending_tx.append(BufferDescriptor(2, 0, 100))
    t, d = sched.peek()
    assert (t.tenant_id, d.length) == (1, 600)
    sched.commit(t)
    # residual 400 < 600: the turn passes to tenant 2 with 400 carried
    t, d = sched.peek()
    assert t.tenant_id == 2 and ts[1].deficit == 400
    sched.commit(t)
    assert ts[2].deficit == 0  # emptied queue forfeits its deficit
    t, _ = sched.peek()
    assert t.tenant_id == 1 and ts[1].deficit == 1400


def test_fcfs_is_arrival_order_and_ignores_weights():
    ts = {1: TenantState(1, 6), 2: TenantState(2, 1)}
    sched = FcfsScheduler(ts)
    arrivals = [2, 2, 2, 1, 2, 1, 2, 2]
    for i, tid in enumerate(arrivals):
        ts[tid].pending_tx.append(BufferDescriptor(tid, i, 1024))
        sched.on_enqueue(tid)
    out = []
    while (pick := sched.peek()) is not None:
        out.append(sched.commit(pick[0]).buffer_id)
    assert out == list(range(len(arrivals)))
    assert Counter(arrivals)[1] / len(arrivals) < 6 / 7


def test_zero_weight_rejected():
    with pytest.raises(ValueError):
        TenantState(1, 0)
