"""Randomized ownership traces over a two-node cluster, checked against a model.

The model tracks which function holds which descriptor and which payload token
is in flight to whom. Legal operations must succeed and keep the model and the
pools in agreement; hostile operations (double free, foreign access, forged or
cross-tenant descriptors, use after send) must be rejected without changing any
owner, and each rejection must be counted exactly once.
"""
from __future__ import annotations

import random
from collections import Counter

from faasfabric import errors
from faasfabric.dne import EngineConfig
from faasfabric.harness.cluster import Cluster, TenantSpec
from faasfabric.iolib import io_get_buffer, io_put_buffer, io_recv, io_send
from faasfabric.mempool import POOL, BufferDescriptor

NODES = ("A", "B")
TOKEN = 8


class OwnershipTrace:
    def __init__(self, seed: int, tenants: int = 3, fns_per_node: int = 2, buffers: int = 48,
                 hostile: float = 0.1):
        self.rng = random.Random(seed)
        self.hostile = hostile
        specs = {t: TenantSpec(t, buffers, 256) for t in range(1, tenants + 1)}
        self.cluster = c = Cluster(list(NODES), specs, default_engine=EngineConfig(initial_rq_depth=8),
                                   channel_capacity=16, drive=False)
        self.fns: list[int] = []
        self.by_tenant: dict[int, list[int]] = {}
        for t in specs:
            for node in NODES:
                for k in range(fns_per_node):
                    fn = t * 100 + NODES.index(node) * 10 + k
                    c.add_function(fn, t, node)
                    self.fns.append(fn)
                    self.by_tenant.setdefault(t, []).append(fn)
        c.start()
        self.held: dict[int, dict[int, BufferDescriptor]] = {f: {} for f in self.fns}
        self.stale: list[tuple[int, BufferDescriptor]] = []
        self.inflight: dict[bytes, int] = {}
        self.expected = Counter()
        self.rejected = 0
        self.delivered = 0
        self.ops = 0
        self._token = 0

    # -- helpers -----------------------------------------------------------------------------

    def ctx(self, fn: int):
        return self.cluster.ctx(fn)

    def _pick_held(self):
        holders = [f for f in self.fns if self.held[f]]
        if not holders:
            return None, None
        f = self.rng.choice(holders)
        return f, self.held[f][self.rng.choice(list(self.held[f]))]

    def _owner(self, fn: int, desc: BufferDescriptor):
        return self.cluster.pools.get(desc.tenant_id, self.ctx(fn).node_id).owner_of(desc)

    # -- legal operations ----------------------------------------------------------------------

    def op_get(self):
        f = self.rng.choice(self.fns)
        try:
            d = io_get_buffer(self.ctx(f))
        except errors.PoolExhausted:
            return
        assert d.buffer_id not in self.held[f]
        self.held[f][d.buffer_id] = d

    def op_send(self):
        f, d = self._pick_held()
        if f is None:
            return
        ctx = self.ctx(f)
        dst = self.rng.choice([g for g in self.by_tenant[ctx.tenant_id] if g != f])
        self._token += 1
        token = self._token.to_bytes(TOKEN, "little")
        d = ctx.write(d, token)
        try:
            io_send(ctx, d, dst)
        except errors.ChannelFull:
            self.held[f][d.buffer_id] = d
            return
        del self.held[f][d.buffer_id]
        self.inflight[token] = dst
        self.stale.append((f, d))

    def op_recv(self):
        f = self.rng.choice(self.fns)
        self._receive(f)

    def _receive(self, f: int) -> bool:
        ctx = self.ctx(f)
        d = io_recv(ctx)
        if d is None:
            return False
        token = bytes(ctx.read(d)[:TOKEN])
        assert self.inflight.pop(token) == f, "payload delivered to the wrong function"
        assert d.tenant_id == ctx.tenant_id
        assert d.buffer_id not in self.held[f]
        self.held[f][d.buffer_id] = d
        self.delivered += 1
        return True

    def op_put(self):
        f, d = self._pick_held()
        if f is None:
            return
        io_put_buffer(self.ctx(f), d)
        del self.held[f][d.buffer_id]
        self.stale.append((f, d))

    def op_engine(self):
        c = self.cluster
        c.engines[self.rng.choice(NODES)].iteration()
        c.clock.run(until=c.clock.now + self.rng.choice((1_000, 5_000, 20_000)))

    # -- hostile operations ----------------------------------------------------------------------

    def _reject(self, fn: int, desc: BufferDescriptor, attempt, kind: str, *exc_types):
        pools = self.cluster.pools
        tenants = {desc.tenant_id, self.ctx(fn).tenant_id}
        snapshot = [(p, [b.owner for b in p.buffers]) for p in pools.pools() if p.tenant_id in tenants]
        try:
            attempt()
        except exc_types:
            self.expected[kind] += 1
            self.rejected += 1
        else:
            raise AssertionError(f"{kind} attempt by {fn} on {desc} was not rejected")
        for p, owners in snapshot:
            assert [b.owner for b in p.buffers] == owners, f"rejected {kind} changed ownership"

    def op_hostile(self):
        choice = self.rng.randrange(5)
        if choice == 0 and self.stale:
            # replay a descriptor this function no longer holds
            f, d = self.rng.choice(self.stale)
            owner = self._owner(f, d)
            if owner == self.ctx(f).owner:
                return
            kind = "double_free" if owner == POOL else "not_owner"
            self._reject(f, d, lambda: io_put_buffer(self.ctx(f), d), kind,
                         errors.DoubleFree, errors.NotOwner)
        elif choice == 1 and self.stale:
            f, d = self.rng.choice(self.stale)
            if self._owner(f, d) == self.ctx(f).owner:
                return
            self._reject(f, d, lambda: self.ctx(f).write(d, b"x"), "access", errors.NotOwner)
        elif choice == 2:
            holder, d = self._pick_held()
            if holder is None:
                return
            node = self.ctx(holder).node_id
            peers = [g for g in self.by_tenant[d.tenant_id] if g != holder and self.ctx(g).node_id == node]
            g = self.rng.choice(peers)
            self._reject(g, d, lambda: self.ctx(g).read(d), "access", errors.NotOwner)
        elif choice == 3:
            holder, d = self._pick_held()
            if holder is None:
                return
            g = self.rng.choice([x for x in self.fns if self.ctx(x).tenant_id != d.tenant_id])
            self._reject(g, d, lambda: self.ctx(g).read(d), "cross_tenant", errors.TenantMismatch)
        elif choice == 4:
            f = self.rng.choice(self.fns)
            ctx = self.ctx(f)
            forged = BufferDescriptor(ctx.tenant_id, ctx.pool.buffer_count + self.rng.randrange(1000), 0)
            self._reject(f, forged, lambda: io_put_buffer(ctx, forged), "forged_descriptor",
                         errors.InvalidDescriptor)

    # -- driving and checks ------------------------------------------------------------------------

    def step(self):
        r = self.rng.random()
        if r < self.hostile:
            self.op_hostile()
        elif r < self.hostile + 0.06:
            self.op_engine()
        else:
            [self.op_get, self.op_send, self.op_recv, self.op_put][self.rng.randrange(4)]()
        self.ops += 1
        if len(self.stale) > 256:
            del self.stale[:128]

    def check_ownership(self):
        """Every modeled holding matches the pool, and no buffer has two holders."""
        seen = set()
        for f, held in self.held.items():
            ctx = self.ctx(f)
            for bid, d in held.items():
                key = (d.tenant_id, ctx.node_id, bid)
                assert key not in seen, f"buffer {key} held twice"
                seen.add(key)
                assert ctx.pool.owner_of(d) == ctx.owner
        for pool in self.cluster.pools.pools():
            assert pool.check_conservation()

    def run(self, n: int, check_every: int = 5000):
        for i in range(n):
            self.step()
            if (i + 1) % check_every == 0:
                self.check_ownership()
        return self

    def drain(self, max_rounds: int = 100_000):
        c = self.cluster
        for f in self.fns:
            for d in list(self.held[f].values()):
                io_put_buffer(self.ctx(f), d)
            self.held[f].clear()
        for _ in range(max_rounds):
            moved = False
            for f in self.fns:
                while self._receive(f):
                    moved = True
                    d = self.held[f].popitem()[1]
                    io_put_buffer(self.ctx(f), d)
            for e in c.engines.values():
                rep = e.iteration()
                moved = moved or not rep.idle
            if c.clock.pending():
                c.clock.run(until=c.clock.next_time())
                moved = True
            if not moved and not any(e.has_pending() or e.repost_shortfall() for e in c.engines.values()):
                break
        return self

    def verdict(self) -> dict:
        c = self.cluster
        return {
            "ops": self.ops,
            "delivered": self.delivered,
            "undelivered": len(self.inflight),
            "leaked": c.leaked_buffers(),
            "dead_letters": sum(len(e.dead_letters) for e in c.engines.values()),
            "rq_restored": all(e.rq_depth(t) == e.initial_depth[t] for e in c.engines.values() for t in e.tenants),
            "rbr_balanced": all(e.check_rbr_balance() for e in c.engines.values()),
            "conserved": all(p.check_conservation() for p in c.pools.pools()),
            "violations": dict(c.counters.violations),
            "expected_rejections": dict(self.expected),
            "rejected": self.rejected,
        }


def assert_clean(v: dict) -> None:
    assert v["undelivered"] == 0 and v["leaked"] == 0 and v["dead_letters"] == 0, v
    assert v["rq_restored"] and v["rbr_balanced"] and v["conserved"], v
    # every counted violation is a rejected hostile attempt; nothing slipped through
    assert {k: n for k, n in v["violations"].items() if n} == v["expected_rejections"], v


def run_seed(seed: int, ops: int) -> dict:
    """One full trace for a process pool: run, drain, return the verdict."""
    trace = OwnershipTrace(seed).run(ops)
    return trace.drain().verdict()
