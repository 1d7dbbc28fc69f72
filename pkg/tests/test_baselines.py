import pytest

from faasfabric import errors
from faasfabric.baselines import BaselineCost, PrimitiveBench, RemoteLock, TransferMode, compare_primitives
from faasfabric.fabric import LinkCost

# fabric operations and software copies each mode needs per message
EXPECTED = {
    TransferMode.TWO_SIDED: (1, 0, 0),
    TransferMode.OWDL: (3, 0, 1),
    TransferMode.OWRC_BEST: (1, 1, 1),
    TransferMode.OWRC_WORST: (1, 1, 1),
}


@pytest.mark.parametrize("mode", list(TransferMode))
def test_op_and_copy_counts(mode):
    bench = PrimitiveBench(mode)
    recs = bench.run_sequential(5, 4096)
    ops, copies, polls = EXPECTED[mode]
    for r in recs:
        assert r.status == "OK" and r.payload_ok
        assert (r.fabric_ops, r.copies, r.poll_discoveries) == (ops, copies, polls)
    assert bench.counters.total_copies == copies * 5
    assert sum(bench.counters.fabric_ops.values()) == ops * 5


def test_latency_ordering_at_4k():
    res = compare_primitives(4096, messages=4)
    lat = {m: res[m.value]["mean_latency_ns"] for m in TransferMode}
    assert lat[TransferMode.TWO_SIDED] < lat[TransferMode.OWRC_BEST] < lat[TransferMode.OWRC_WORST] < lat[TransferMode.OWDL]


def test_two_sided_latency_is_one_link_traversal():
    link = LinkCost()
    bench = PrimitiveBench(TransferMode.TWO_SIDED, link=link)
    (rec,) = bench.run_sequential(1, 4096)
    assert rec.latency_ns == link.base_ns + round(link.per_byte_ns * 4096)


def test_owrc_latency_is_arrival_poll_and_copy():
    link, cost = LinkCost(), BaselineCost()
    bench = PrimitiveBench(TransferMode.OWRC_BEST, link=link, cost=cost)
    (rec,) = bench.run_sequential(1, 4096)
    arrival = link.base_ns + round(link.per_byte_ns * 4096)
    # the receiver polls every interval from the moment the write was posted
    polled = -(-arrival // cost.poll_interval_ns) * cost.poll_interval_ns
    assert rec.latency_ns == polled + round(cost.copy_ns_per_byte * 4096)


def test_remote_lock_single_holder():
    lock = RemoteLock(0)
    assert lock.try_acquire("A")
    assert not lock.try_acquire("A2")
    with pytest.raises(errors.NotOwner):
        lock.release("A2")
    lock.release("A")
    assert lock.try_acquire("A2")


def test_owdl_contention_retries_and_serialises():
    bench = PrimitiveBench(TransferMode.OWDL, senders=("A", "A2"))
    first = bench.submit(4096, "A")
    second = bench.submit(4096, "A2")
    bench.run()
    assert first.status == second.status == "OK"
    assert first.payload_ok and second.payload_ok
    assert second.lock_retries >= 1
    assert bench.counters.events["lock_retry"] == second.lock_retries
    # the write of the second sender could only start after the first released
    assert second.end_ns > first.end_ns


def test_owdl_lock_timeout():
    cost = BaselineCost(lock_max_retries=0)
    bench = PrimitiveBench(TransferMode.OWDL, senders=("A", "A2"), cost=cost)
    bench.submit(4096, "A")
    loser = bench.submit(4096, "A2")
    bench.run()
    assert loser.status == errors.LockTimeout.code and loser.end_ns is None


def test_owrc_staging_credit_stalls_second_write():
    bench = PrimitiveBench(TransferMode.OWRC_BEST, staging_buffers=1)
    a = bench.submit(4096)
    b = bench.submit(4096)
    bench.run()
    assert a.payload_ok and b.payload_ok
    # b cannot land before a's copy freed the only staging slot
    assert b.end_ns - a.end_ns >= 2000 + 5 * 4096
    assert bench.staging_free and len(bench.staging_free) == 1


def test_owrc_staging_exhausted_without_stall():
    bench = PrimitiveBench(TransferMode.OWRC_BEST, staging_buffers=1, stall_on_full=False)
    bench.submit(1024)
    with pytest.raises(errors.RdmaPoolExhausted):
        bench.submit(1024)


def test_worst_copy_costs_more_than_best():
    best = PrimitiveBench(TransferMode.OWRC_BEST).run_sequential(1, 8000)[0]
    worst = PrimitiveBench(TransferMode.OWRC_WORST).run_sequential(1, 8000)[0]
    assert worst.latency_ns - best.latency_ns == round(0.5 * 8000 * 1.5) - round(0.5 * 8000)
