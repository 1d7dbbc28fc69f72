"""Cluster-edge gateway.

Client HTTP is terminated here. A request body is copied once into a fabric
buffer of the ingress tenant and handed to the frontend function; the response
buffer is copied once back out to the client connection. Nothing between those
two boundary copies touches payload bytes.

Each worker owns its connections for their whole lifetime. The master only
accepts connections, picks a worker by hashing the connection 4-tuple, and
issues spawn/retire commands from autoscaler samples. The worker logic is
transport-agnostic; :class:`SimIngress` runs it on the virtual clock and
``faasfabric.ingress.server`` runs it on real sockets.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from faasfabric import errors
from faasfabric.clock import SerialServer
from faasfabric.iolib import REQUEST_ID, FunctionContext, io_get_buffer, io_put_buffer, io_recv, io_send
from faasfabric.ingress.autoscaler import Autoscaler, AutoscalerConfig, ScaleAction
from faasfabric.ingress.http import HttpError, HttpRequest, ServerConnection
from faasfabric.mempool import DescFlags, OwnerRef

DEFAULT_FN_BASE = 0xF000


class WorkerState(str, Enum):
    RUNNING = "RUNNING"
    DRAINING = "DRAINING"
    RETIRED = "RETIRED"


@dataclass
class WorkerCost:
    """Service time of one loop item, in virtual ns (SIM only)."""

    request_ns: int = 6_000
    response_ns: int = 4_000
    per_byte_ns: float = 0.25


@dataclass
class ConversionEntry:
    request_id: int
    conn_id: int
    path: str
    keep_alive: bool
    started_ns: int


class ClientConn:
    """Gateway side of one client connection."""

    def __init__(self, conn_id: int, four_tuple: tuple, worker_id: int, max_body: int, transport=None):
        self.conn_id = conn_id
        self.four_tuple = four_tuple
        self.worker_id = worker_id
        self.parser = ServerConnection(max_body)
        self.transport = transport
        self.inflight: int | None = None
        self.closed = False


def rss_hash(four_tuple: Sequence) -> int:
    raw = repr(tuple(four_tuple)).encode()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def rss_dispatch(four_tuple: Sequence, live: Sequence[int]) -> int:
    """Worker for a new connection: hash of its 4-tuple over the live workers."""
    if not live:
        raise errors.NotFound("no live ingress worker")
    return live[rss_hash(four_tuple) % len(live)]


class IngressWorker:
    def __init__(self, gateway: "Gateway", worker_id: int, ctx: FunctionContext):
        self.gateway = gateway
        self.worker_id = worker_id
        self.ctx = ctx
        self.connections: dict[int, ClientConn] = {}
        self.entries: dict[int, ConversionEntry] = {}
        self.state = WorkerState.RUNNING
        self.busy_ns = 0
        self.responses = 0

    @property
    def fn_id(self) -> int:
        return self.ctx.fn_id

    def adopt(self, conn: ClientConn) -> None:
        self.connections[conn.conn_id] = conn

    # -- inbound ---------------------------------------------------------------------------

    def on_data(self, conn: ClientConn, data: bytes) -> int:
        gw = self.gateway
        if gw.pinning.get(conn.conn_id) != self.worker_id:
            gw.counters.record_violation("connection_pinning")
        if conn.closed:
            return 0
        conn.parser.feed(data)
        return self._serve(conn) + round(gw.cost.per_byte_ns * len(data))

    def on_client_close(self, conn: ClientConn) -> int:
        if not conn.closed:
            conn.parser.feed(b"")
            self._close(conn, notify=False)
        return 0

    def _serve(self, conn: ClientConn) -> int:
        """Handle every complete request buffered on ``conn``."""
        cost = 0
        while not conn.closed:
            try:
                req = conn.parser.next_request()
            except HttpError as err:
                self.gateway.counters.record_event(f"http_{err.status}")
                self._send(conn, conn.parser.fail(err))
                self._close(conn)
                break
            if req is None:
                if conn.parser.closed:
                    self._close(conn, notify=False)
                break
            cost += self.gateway.cost.request_ns
            self.handle_request(conn, req)
        return cost

    def handle_request(self, conn: ClientConn, req: HttpRequest) -> None:
        gw, ctx = self.gateway, self.ctx
        fn = gw.routes.get(req.path)
        if fn is None:
            self._reply(conn, 404, f"no function serves {req.path}".encode(), req.keep_alive)
            return
        try:
            desc = io_get_buffer(ctx)
        except errors.PoolExhausted:
            self._reply(conn, 503, b"ingress pool exhausted", req.keep_alive)
            return
        rid = next(gw.request_ids)
        desc = ctx.write(desc, REQUEST_ID.pack(rid))
        # the one inbound payload copy: terminated TCP bytes into the fabric buffer
        desc = ctx.pool.write(desc, ctx.owner, req.body, REQUEST_ID.size, copy_site="ingress_in")
        try:
            io_send(ctx, desc, fn, DescFlags.REQUEST)
        except (errors.ChannelFull, errors.NotFound, errors.Disconnected):
            io_put_buffer(ctx, desc)
            gw.counters.record_event("ingress_send_failed")
            self._reply(conn, 503, b"frontend unavailable", req.keep_alive)
            return
        self.entries[rid] = ConversionEntry(rid, conn.conn_id, req.path, req.keep_alive, gw.now())
        conn.inflight = rid
        gw.entries_created += 1

    # -- responses -------------------------------------------------------------------------

    def poll_one(self) -> int:
        desc = io_recv(self.ctx)
        if desc is None:
            return 0
        cost = self.gateway.cost.response_ns + round(self.gateway.cost.per_byte_ns * desc.length)
        return cost + self.handle_response(desc)

    def handle_response(self, desc) -> int:
        gw, ctx = self.gateway, self.ctx
        if desc.length < REQUEST_ID.size or not desc.flags & DescFlags.RESPONSE:
            gw.counters.record_event("malformed_response")
            io_put_buffer(ctx, desc)
            return 0
        view = ctx.read(desc)
        (rid,) = REQUEST_ID.unpack(view[:REQUEST_ID.size])
        entry = self.entries.pop(rid, None)
        conn = self.connections.get(entry.conn_id) if entry else None
        if conn is None or conn.closed:
            gw.stale_responses += 1
            gw.counters.record_event(errors.StaleResponse.code)
            io_put_buffer(ctx, desc)
            return 0
        # the one outbound payload copy: fabric buffer into the client's byte stream
        body = bytes(view[REQUEST_ID.size:])
        gw.counters.record_copy("ingress_out", len(body))
        io_put_buffer(ctx, desc)
        conn.inflight = None
        close = not entry.keep_alive or self.state is not WorkerState.RUNNING
        self._send(conn, conn.parser.respond(200, body, close))
        gw.responses_written += 1
        self.responses += 1
        gw.latencies.append(gw.now() - entry.started_ns)
        cost = 0
        if conn.parser.closed:
            self._close(conn)
        else:
            cost = self._serve(conn)
        self._check_drained()
        return cost

    # -- helpers ---------------------------------------------------------------------------

    def _reply(self, conn: ClientConn, status: int, body: bytes, keep_alive: bool) -> None:
        self.gateway.counters.record_event(f"http_{status}")
        self._send(conn, conn.parser.respond(status, body, close=not keep_alive))
        if conn.parser.closed:
            self._close(conn)

    def _send(self, conn: ClientConn, data: bytes) -> None:
        if conn.transport is not None:
            conn.transport.write(data)

    def _close(self, conn: ClientConn, notify: bool = True) -> None:
        conn.closed = True
        self.connections.pop(conn.conn_id, None)
        if notify and conn.transport is not None:
            conn.transport.close()
        self._check_drained()

    def _check_drained(self) -> None:
        if self.state is WorkerState.DRAINING and not self.connections:
            self.state = WorkerState.RETIRED

    def retire(self, abrupt: bool = False) -> int:
        """Stop taking connections. Draining finishes in-flight requests first;
        abrupt retirement drops them, and their late responses turn stale."""
        if abrupt:
            self.gateway.interrupted += len(self.entries)
            self.entries.clear()
            for conn in list(self.connections.values()):
                self._close(conn)
            self.state = WorkerState.RETIRED
            return 0
        self.state = WorkerState.DRAINING
        for conn in list(self.connections.values()):
            if conn.inflight is None:
                self._close(conn)
        self._check_drained()
        return 0

    def revive(self) -> int:
        self.state = WorkerState.RUNNING
        return 0


class Gateway:
    """Ingress master: worker set, connection dispatch and autoscaling."""

    def __init__(self, cluster, node, tenant_id: int, routes: dict[str, int],
                 autoscaler: AutoscalerConfig | None = None, cost: WorkerCost | None = None,
                 fn_base: int = DEFAULT_FN_BASE, clock=None):
        self.cluster = cluster
        self.node = node
        self.tenant_id = tenant_id
        self.routes = dict(routes)
        self.cost = cost or WorkerCost()
        self.fn_base = fn_base
        self.clock = clock or cluster.clock
        self.counters = cluster.counters
        self.autoscaler = Autoscaler(autoscaler or AutoscalerConfig())
        self.workers: dict[int, IngressWorker] = {}
        self.pinning: dict[int, int] = {}
        self.request_ids = itertools.count(1)
        self._conn_ids = itertools.count(1)
        self.entries_created = 0
        self.responses_written = 0
        self.stale_responses = 0
        self.interrupted = 0
        self.latencies: list[int] = []
        self.metrics: list[dict] = []
        # hooks for the transport driver
        self.on_spawn: Callable[[IngressWorker], None] | None = None
        self.command: Callable = lambda worker, fn, *args: fn(*args)
        self._marks: dict[int, int] = {}
        self._last_responses = 0
        self._last_tick = None
        pool = cluster.pools.get(tenant_id, node)
        self.max_body = pool.buffer_size - REQUEST_ID.size
        for _ in range(self.autoscaler.config.min_workers):
            self.spawn()

    def now(self) -> int:
        return self.clock.now

    @property
    def live(self) -> list[int]:
        return sorted(w for w, wk in self.workers.items() if wk.state is WorkerState.RUNNING)

    @property
    def open_entries(self) -> int:
        return sum(len(w.entries) for w in self.workers.values())

    def spawn(self) -> IngressWorker:
        for wid in sorted(self.workers):
            worker = self.workers[wid]
            if worker.state is WorkerState.RETIRED:
                self.command(worker, worker.revive)
                return worker
        wid = len(self.workers)
        owner = OwnerRef.ingress(wid)
        ctx = self.cluster.add_function(self.fn_base + wid, self.tenant_id, self.node, owner=owner)
        worker = self.workers[wid] = IngressWorker(self, wid, ctx)
        if self.on_spawn is not None:
            self.on_spawn(worker)
        return worker

    def retire(self, abrupt: bool | None = None) -> IngressWorker | None:
        live = self.live
        if len(live) <= 1:
            return None
        worker = self.workers[live[-1]]
        if abrupt is None:
            abrupt = self.autoscaler.config.abrupt_retire
        # leave RUNNING at once so no new connection lands here
        worker.state = WorkerState.DRAINING
        self.command(worker, worker.retire, abrupt)
        return worker

    def accept(self, four_tuple: tuple, transport=None) -> ClientConn:
        wid = rss_dispatch(four_tuple, self.live)
        conn = ClientConn(next(self._conn_ids), tuple(four_tuple), wid, self.max_body, transport)
        self.pinning[conn.conn_id] = wid
        return conn

    def autoscale_tick(self) -> ScaleAction:
        """Sample the last window's busy fraction of every live worker and act."""
        now = self.now()
        window = self.autoscaler.config.window_ns if self._last_tick is None else now - self._last_tick
        self._last_tick = now
        utils = []
        for wid in self.live:
            busy = self.workers[wid].busy_ns
            utils.append((busy - self._marks.get(wid, 0)) / window if window else 0.0)
        for wid, w in self.workers.items():
            self._marks[wid] = w.busy_ns
        action = self.autoscaler.tick(utils)
        if action is ScaleAction.SPAWN:
            self.spawn()
        elif action is ScaleAction.RETIRE:
            self.retire()
        rps = (self.responses_written - self._last_responses) * 1e9 / window if window else 0.0
        self._last_responses = self.responses_written
        self.metrics.append({
            "time": now,
            "worker_count": len(self.live),
            "avg_utilization": round(sum(utils) / len(utils), 6) if utils else 0.0,
            "rps": round(rps, 3),
        })
        return action

    def summary(self) -> dict:
        return {
            "workers": len(self.live),
            "entries_created": self.entries_created,
            "responses_written": self.responses_written,
            "stale_responses": self.stale_responses,
            "interrupted": self.interrupted,
            "open_entries": self.open_entries,
        }


class _SimTransport:
    def __init__(self, driver: "SimIngress", loop: SerialServer, client):
        self.driver, self.loop, self.client = driver, loop, client

    def write(self, data: bytes) -> None:
        self.loop.defer(self.driver.clock.call_later, self.driver.latency_ns, self.client.on_bytes, data)

    def close(self) -> None:
        self.loop.defer(self.driver.clock.call_later, self.driver.latency_ns, self.client.on_close)


class SimClientHandle:
    """What a simulated client holds for one open connection."""

    def __init__(self, driver: "SimIngress", conn: ClientConn):
        self.driver = driver
        self.conn = conn

    def send(self, data: bytes) -> None:
        d = self.driver
        worker = d.gateway.workers[self.conn.worker_id]
        d.clock.call_later(d.latency_ns, d.run_on, worker, worker.on_data, self.conn, data)

    def close(self) -> None:
        d = self.driver
        worker = d.gateway.workers[self.conn.worker_id]
        d.clock.call_later(d.latency_ns, d.run_on, worker, worker.on_client_close, self.conn)


class SimIngress:
    """Runs every worker as a run-to-completion loop on the virtual clock."""

    def __init__(self, gateway: Gateway, latency_ns: int = 20_000):
        self.gateway = gateway
        self.clock = gateway.clock
        self.latency_ns = latency_ns
        self.loops: dict[int, SerialServer] = {}
        gateway.on_spawn = self._attach
        gateway.command = lambda worker, fn, *args: self.run_on(worker, fn, *args)
        for worker in gateway.workers.values():
            self._attach(worker)
        self._stop_at = None

    def _attach(self, worker: IngressWorker) -> None:
        self.loops[worker.worker_id] = SerialServer(self.clock)
        worker.ctx.endpoint.notify.listeners.append(lambda: self.run_on(worker, worker.poll_one))

    def run_on(self, worker: IngressWorker, fn, *args) -> None:
        self.loops[worker.worker_id].submit(self._account, worker, fn, args)

    @staticmethod
    def _account(worker: IngressWorker, fn, args) -> int:
        cost = fn(*args) or 0
        worker.busy_ns += cost
        return cost

    def connect(self, four_tuple: tuple, client) -> SimClientHandle:
        """Open a connection; ``client`` receives ``on_bytes(data)`` and ``on_close()``."""
        conn = self.gateway.accept(four_tuple)
        loop = self.loops[conn.worker_id]
        conn.transport = _SimTransport(self, loop, client)
        self.gateway.workers[conn.worker_id].adopt(conn)
        return SimClientHandle(self, conn)

    def start_autoscaler(self, stop_at: int | None = None) -> None:
        self._stop_at = stop_at
        self.clock.call_later(self.gateway.autoscaler.config.window_ns, self._tick)

    def _tick(self) -> None:
        self.gateway.autoscale_tick()
        if self._stop_at is None or self.clock.now < self._stop_at:
            self.clock.call_later(self.gateway.autoscaler.config.window_ns, self._tick)
