"""Workload functions: an echo pair, a multi-function service graph, and load clients.

Apps only see :mod:`faasfabric.iolib`. Each app's ``on_message`` handles one
descriptor and returns its service cost in virtual ns; the drivers below run
apps either as run-to-completion loops on the virtual clock or as threads.
"""
from __future__ import annotations

import hashlib
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from faasfabric import errors
from faasfabric.clock import SerialServer
from faasfabric.iolib import REQUEST_ID, FunctionContext, io_get_buffer, io_put_buffer, io_recv, io_send
from faasfabric.ipc import Wait
from faasfabric.mempool import BufferDescriptor, DescFlags


def payload_for(tenant: int, seq: int, size: int) -> bytes:
    stamp = tenant.to_bytes(2, "little") + seq.to_bytes(6, "little")
    return (stamp * (size // 8 + 1))[:size]


class App:
    ctx: FunctionContext

    def on_message(self, desc: BufferDescriptor) -> int:
        raise NotImplementedError

    def poll_one(self) -> int:
        desc = io_recv(self.ctx)
        if desc is None:
            return 0
        return self.on_message(desc)


class EchoServer(App):
    """Replies in place: the request buffer becomes the response."""

    def __init__(self, ctx: FunctionContext, cost_ns: int = 2_000):
        self.ctx = ctx
        self.cost_ns = cost_ns
        self.served = 0

    def on_message(self, desc: BufferDescriptor) -> int:
        self.served += 1
        io_send(self.ctx, desc, desc.src_fn, DescFlags.RESPONSE)
        return self.cost_ns


@dataclass
class Burst:
    at_ns: int
    size: int


class EchoClient(App):
    """Closed-loop client: keeps ``concurrency`` requests outstanding between
    ``start_ns`` and ``stop_ns``; a burst adds extra requests on top, and the
    surplus is not replenished as it completes."""

    def __init__(self, ctx: FunctionContext, server_fn: int, clock, concurrency: int = 1,
                 message_size: int = 1024, start_ns: int = 0, stop_ns: int | None = None,
                 bursts: list[Burst] | None = None, cost_ns: int = 1_000, verify: bool = True):
        self.ctx = ctx
        self.server_fn = server_fn
        self.clock = clock
        self.concurrency = concurrency
        self.message_size = message_size
        self.start_ns = start_ns
        self.stop_ns = stop_ns
        self.bursts = list(bursts or [])
        self.cost_ns = cost_ns
        self.verify = verify
        self.outstanding: dict[int, int] = {}
        self.seq = 0
        self.completions: list[tuple[int, int, int]] = []  # (time, bytes, latency)
        self.corrupt = 0
        self.send_failures = Counter()

    def active(self) -> bool:
        now = self.clock.now
        return now >= self.start_ns and (self.stop_ns is None or now < self.stop_ns)

    def send_one(self) -> bool:
        ctx = self.ctx
        try:
            desc = io_get_buffer(ctx)
        except errors.PoolExhausted:
            self.send_failures["POOL_EXHAUSTED"] += 1
            return False
        self.seq += 1
        seq = self.seq
        desc = ctx.write(desc, REQUEST_ID.pack(seq) + payload_for(ctx.tenant_id, seq, self.message_size))
        try:
            io_send(ctx, desc, self.server_fn, DescFlags.REQUEST)
        except errors.DataplaneError as exc:
            io_put_buffer(ctx, desc)
            self.send_failures[exc.code] += 1
            return False
        self.outstanding[seq] = self.clock.now
        return True

    def fill(self, target: int) -> int:
        sent = 0
        while len(self.outstanding) < target and self.active():
            if not self.send_one():
                break
            sent += 1
        return sent

    def start(self) -> int:
        return self.fill(self.concurrency) * self.cost_ns

    def burst(self, size: int) -> int:
        return self.fill(len(self.outstanding) + size) * self.cost_ns

    def on_message(self, desc: BufferDescriptor) -> int:
        view = self.ctx.read(desc)
        (seq,) = REQUEST_ID.unpack(view[:REQUEST_ID.size])
        started = self.outstanding.pop(seq, None)
        if started is None:
            self.corrupt += 1
        else:
            if self.verify and bytes(view[REQUEST_ID.size:]) != payload_for(self.ctx.tenant_id, seq, self.message_size):
                self.corrupt += 1
            self.completions.append((self.clock.now, desc.length - REQUEST_ID.size, self.clock.now - started))
        io_put_buffer(self.ctx, desc)
        return self.cost_ns + self.fill(self.concurrency) * self.cost_ns


# -- service graph ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Call:
    callee: str
    op: str


@dataclass
class ServiceSpec:
    """A named function and, per operation, the calls it makes in order."""

    name: str
    ops: dict[str, list[Call]] = field(default_factory=dict)


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(4, "little"))
        h.update(p)
    return h.digest()


def sub_request(name: str, op: str, request: bytes, index: int, call: Call) -> bytes:
    """Payload a service sends for its ``index``-th call."""
    return call.op.encode() + b"|" + _digest(name.encode(), op.encode(), request, bytes([index]))[:16]


def request_op(payload) -> str:
    return bytes(payload[:32]).partition(b"|")[0].decode()


@dataclass
class _Pending:
    caller_fn: int
    rid: int
    op: str
    request: memoryview  # view into the held request buffer, valid until the reply
    desc: BufferDescriptor
    results: list = field(default_factory=list)
    waiting_on: int | None = None


class HopLog:
    """Descriptor hand-offs per request id, across all functions of a run."""

    def __init__(self):
        self.hops: Counter = Counter()
        self._lock = threading.Lock()

    def add(self, rid: int) -> None:
        with self._lock:
            self.hops[rid] += 1


class ChainService(App):
    """One function of the service graph.

    A request is ``op|body``; the function makes its configured calls one after
    another and answers with a digest over its name, op, request and every call
    result. The response is written into the request buffer and sent back in place.
    """

    def __init__(self, ctx: FunctionContext, spec: ServiceSpec, fn_ids: dict[str, int],
                 hops: HopLog, cost_ns: int = 5_000):
        self.ctx = ctx
        self.spec = spec
        self.fn_ids = fn_ids
        self.hops = hops
        self.cost_ns = cost_ns
        self.pending: dict[tuple[int, int], _Pending] = {}
        self.handled = 0

    def on_message(self, desc: BufferDescriptor) -> int:
        view = self.ctx.read(desc)
        (rid,) = REQUEST_ID.unpack(view[:REQUEST_ID.size])
        if desc.flags & DescFlags.RESPONSE:
            state = self._waiting(rid, desc.src_fn)
            state.results.append(bytes(view[REQUEST_ID.size:]))
            io_put_buffer(self.ctx, desc)
            self._advance(state)
        else:
            self.handled += 1
            request = view[REQUEST_ID.size:]
            state = _Pending(desc.src_fn, rid, request_op(request), request, desc)
            self.pending[(rid, desc.src_fn)] = state
            self._advance(state)
        return self.cost_ns

    def _waiting(self, rid: int, src_fn: int) -> _Pending:
        for state in self.pending.values():
            if state.rid == rid and state.waiting_on == src_fn:
                return state
        raise errors.NotFound(f"{self.spec.name}: no call to {src_fn} pending for request {rid}")

    def _advance(self, state: _Pending) -> None:
        calls = self.spec.ops.get(state.op, [])
        i = len(state.results)
        if i < len(calls):
            call = calls[i]
            sub = sub_request(self.spec.name, state.op, state.request, i, call)
            out = io_get_buffer(self.ctx)
            out = self.ctx.write(out, REQUEST_ID.pack(state.rid) + sub)
            state.waiting_on = self.fn_ids[call.callee]
            self.hops.add(state.rid)
            io_send(self.ctx, out, state.waiting_on, DescFlags.REQUEST)
            return
        del self.pending[(state.rid, state.caller_fn)]
        answer = _digest(self.spec.name.encode(), state.op.encode(), state.request, *state.results)
        desc = state.desc.replace(length=0)
        desc = self.ctx.write(desc, REQUEST_ID.pack(state.rid) + answer)
        self.hops.add(state.rid)
        io_send(self.ctx, desc, state.caller_fn, DescFlags.RESPONSE)


def reference_response(graph: dict[str, ServiceSpec], name: str, request: bytes) -> tuple[bytes, int]:
    """Direct recursive evaluation of the graph: (response, descriptor hand-offs
    including the request into ``name`` and its response)."""
    spec = graph[name]
    op = request_op(request)
    results, hops = [], 2
    for i, call in enumerate(spec.ops.get(op, [])):
        sub = sub_request(name, op, request, i, call)
        res, h = reference_response(graph, call.callee, sub)
        results.append(res)
        hops += h
    return _digest(name.encode(), op.encode(), request, *results), hops


def boutique_graph() -> dict[str, ServiceSpec]:
    """Ten services shaped like a public microservice shop demo (approximate)."""
    c = Call
    specs = [
        ServiceSpec("frontend", {
            "home": [c("currency", "supported"), c("catalog", "list"), c("cart", "get"),
                     c("currency", "convert"), c("recommendation", "list"), c("ad", "get")],
            "product": [c("catalog", "get"), c("currency", "convert"), c("cart", "get"),
                        c("recommendation", "list"), c("ad", "get")],
            "checkout": [c("cart", "get"), c("currency", "convert"), c("checkout", "place")],
        }),
        ServiceSpec("cart", {"get": [], "add": [], "empty": []}),
        ServiceSpec("catalog", {"list": [], "get": [], "search": []}),
        ServiceSpec("currency", {"supported": [], "convert": []}),
        ServiceSpec("recommendation", {"list": [c("catalog", "list")]}),
        ServiceSpec("ad", {"get": []}),
        ServiceSpec("checkout", {"place": [
            c("cart", "get"), c("catalog", "get"), c("currency", "convert"), c("shipping", "quote"),
            c("payment", "charge"), c("shipping", "ship"), c("email", "send"), c("cart", "empty")]}),
        ServiceSpec("shipping", {"quote": [], "ship": []}),
        ServiceSpec("payment", {"charge": []}),
        ServiceSpec("email", {"send": []}),
    ]
    return {s.name: s for s in specs}


class ChainClient(App):
    """Closed-loop client of the graph's entry function; checks every response."""

    def __init__(self, ctx: FunctionContext, entry_fn: int, requests: list[bytes], expected: list[bytes],
                 hops: HopLog, concurrency: int = 8, clock=None, cost_ns: int = 1_000):
        self.ctx = ctx
        self.entry_fn = entry_fn
        self.requests = requests
        self.expected = expected
        self.hops = hops
        self.concurrency = concurrency
        self.clock = clock
        self.cost_ns = cost_ns
        self.next_index = 0
        self.outstanding: dict[int, int] = {}
        self.responses: dict[int, bytes] = {}
        self.mismatches = 0
        self.latencies: list[int] = []

    def _send(self, index: int) -> None:
        rid = index + 1
        desc = io_get_buffer(self.ctx)
        desc = self.ctx.write(desc, REQUEST_ID.pack(rid) + self.requests[index])
        self.outstanding[rid] = self.clock.now if self.clock is not None else 0
        self.hops.add(rid)
        io_send(self.ctx, desc, self.entry_fn, DescFlags.REQUEST)

    def fill(self) -> int:
        n = 0
        while len(self.outstanding) < self.concurrency and self.next_index < len(self.requests):
            self._send(self.next_index)
            self.next_index += 1
            n += 1
        return n * self.cost_ns

    start = fill

    def on_message(self, desc: BufferDescriptor) -> int:
        view = self.ctx.read(desc)
        (rid,) = REQUEST_ID.unpack(view[:REQUEST_ID.size])
        body = bytes(view[REQUEST_ID.size:])
        io_put_buffer(self.ctx, desc)
        started = self.outstanding.pop(rid)
        if self.clock is not None:
            self.latencies.append(self.clock.now - started)
        self.responses[rid] = body
        if body != self.expected[rid - 1]:
            self.mismatches += 1
        return self.cost_ns + self.fill()

    @property
    def done(self) -> bool:
        return len(self.responses) == len(self.requests)


def make_requests(n: int, rng, ops=("home", "product", "checkout")) -> list[bytes]:
    out = []
    for _ in range(n):
        op = ops[rng.randrange(len(ops))]
        out.append(op.encode() + b"|" + rng.randbytes(rng.randrange(16, 256)))
    return out


# -- drivers ----------------------------------------------------------------------------------

class SimDriver:
    """Runs each app as a run-to-completion loop woken by its endpoint."""

    def __init__(self, clock):
        self.clock = clock
        self.loops: dict[int, SerialServer] = {}
        self.apps: dict[int, App] = {}

    def attach(self, app: App) -> SerialServer:
        loop = self.loops[app.ctx.fn_id] = SerialServer(self.clock)
        self.apps[app.ctx.fn_id] = app
        app.ctx.endpoint.notify.listeners.append(lambda: loop.submit(app.poll_one))
        return loop

    def at(self, when: int, app: App, fn, *args) -> None:
        loop = self.loops[app.ctx.fn_id]
        self.clock.call_at(when, loop.submit, fn, *args)

    def busy_ns(self, fn_id: int) -> int:
        return self.loops[fn_id].busy_ns


class ThreadDriver:
    """Runs each app on its own thread, blocking on its endpoint."""

    def __init__(self):
        self.threads: list[threading.Thread] = []
        self.apps: dict[int, App] = {}
        self._stop = threading.Event()
        self._locks: dict[int, threading.Lock] = defaultdict(threading.Lock)

    def attach(self, app: App) -> None:
        self.apps[app.ctx.fn_id] = app
        t = threading.Thread(target=self._loop, args=(app,), name=f"fn-{app.ctx.fn_id}", daemon=True)
        self.threads.append(t)
        t.start()

    def call(self, app: App, fn, *args):
        with self._locks[app.ctx.fn_id]:
            return fn(*args)

    def _loop(self, app: App) -> None:
        lock = self._locks[app.ctx.fn_id]
        while not self._stop.is_set():
            desc = io_recv(app.ctx, Wait.EVENT, timeout=0.05)
            if desc is not None:
                with lock:
                    app.on_message(desc)

    def stop(self) -> None:
        self._stop.set()
        for t in self.threads:
            t.join(2.0)


# -- HTTP clients (simulated connections through the gateway) -----------------------------------

class _Sink:
    """Callbacks for one physical connection; events for a superseded one are dropped."""

    def __init__(self, conn: "_HttpConn", generation: int):
        self.conn = conn
        self.generation = generation

    def on_bytes(self, data: bytes) -> None:
        if self.generation == self.conn.generation:
            self.conn.on_bytes(data)

    def on_close(self) -> None:
        if self.generation == self.conn.generation:
            self.conn.on_close()


class _HttpConn:
    def __init__(self, owner: "HttpLoadClient", index: int):
        self.owner = owner
        self.index = index
        self.port = 40_000
        self.handle = None
        self.parser = None
        self.inflight: tuple[int, bytes] | None = None
        self.used = 0
        self.generation = 0
        self.thinking = False

    def open(self) -> None:
        from faasfabric.ingress.http import ClientConnection
        self.port += 1
        self.used = 0
        four = (f"10.1.{self.index // 250}.{self.index % 250 + 1}", self.port, "10.0.0.1", 80)
        self.parser = ClientConnection()
        self.generation += 1
        self.handle = self.owner.ingress.connect(four, _Sink(self, self.generation))
        self.owner.connects += 1

    def send_next(self) -> None:
        o = self.owner
        if not o.active():
            self.handle.close()
            self.handle = None
            return
        body = o.rng.randbytes(o.body_size)
        self.inflight = (o.clock.now, body)
        self.used += 1
        last = o.requests_per_conn is not None and self.used >= o.requests_per_conn
        self.handle.send(self.parser.request("POST", o.path, body, keep_alive=not last))
        o.sent += 1

    def on_bytes(self, data: bytes) -> None:
        o = self.owner
        for resp in self.parser.feed(data):
            started, body = self.inflight
            self.inflight = None
            o.latencies.append(o.clock.now - started)
            o.statuses[resp.status] += 1
            if resp.status == 200 and resp.body != body:
                o.corrupt += 1
            if resp.close:
                self.handle = None
                if o.active():
                    self.open()
            if o.think_ns:
                self.thinking = True
                o.clock.call_later(o.think_ns, self._resume)
            else:
                self._resume()

    def _resume(self) -> None:
        self.thinking = False
        if self.handle is not None and self.inflight is None:
            self.send_next()

    def on_close(self) -> None:
        if self.handle is None:
            return
        if self.inflight is not None:
            self.owner.interrupted += 1
            self.inflight = None
        if not self.owner.active():
            self.handle = None
            return
        self.open()
        if not self.thinking:
            self.send_next()


class HttpLoadClient:
    """Closed-loop HTTP/1.1 clients with keep-alive, each on its own connection.

    A connection closed by the gateway is reopened (new source port, so it may
    land on another worker); a request lost with it counts as interrupted. With
    ``requests_per_conn`` set, each connection asks to close after that many
    requests and reconnects. ``first_host`` offsets the source addresses so
    several clients never share a 4-tuple.
    """

    def __init__(self, ingress, connections: int, path: str, body_size: int, rng,
                 start_ns: int = 0, stop_ns: int | None = None, think_ns: int = 0,
                 requests_per_conn: int | None = None, first_host: int = 0):
        self.ingress = ingress
        self.clock = ingress.clock
        self.path = path
        self.body_size = body_size
        self.rng = rng
        self.start_ns = start_ns
        self.stop_ns = stop_ns
        self.think_ns = think_ns
        self.requests_per_conn = requests_per_conn
        self.conns = [_HttpConn(self, first_host + i) for i in range(connections)]
        self.sent = 0
        self.connects = 0
        self.corrupt = 0
        self.interrupted = 0
        self.statuses: Counter = Counter()
        self.latencies: list[int] = []
        self.clock.call_at(start_ns, self._start)

    def active(self) -> bool:
        return self.stop_ns is None or self.clock.now < self.stop_ns

    def _start(self) -> None:
        for c in self.conns:
            c.open()
            c.send_next()
