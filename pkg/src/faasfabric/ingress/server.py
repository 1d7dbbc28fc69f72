"""Gateway on real loopback sockets: one accept thread, one thread per worker.

Workers never share a connection. The accept thread hands a new socket to its
worker through that worker's inbox; spawn/retire commands travel the same way.
Busy time is wall time spent inside worker handlers.
"""
from __future__ import annotations

import queue
import selectors
import socket
import threading
import time

from faasfabric.ingress.gateway import ClientConn, Gateway, IngressWorker


class _SocketTransport:
    def __init__(self, sock: socket.socket, sel: selectors.BaseSelector):
        self.sock = sock
        self.sel = sel

    def write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError:
            pass

    def close(self) -> None:
        try:
            self.sel.unregister(self.sock)
        except (KeyError, ValueError):
            pass
        self.sock.close()


class SocketIngress:
    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0,
                 idle_s: float = 0.001, autoscale: bool = True):
        self.gateway = gateway
        self.idle_s = idle_s
        self.autoscale = autoscale
        self.listener = socket.create_server((host, port))
        self.listener.setblocking(False)
        self.address = self.listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._inbox: dict[int, queue.SimpleQueue] = {}
        gateway.on_spawn = self._start_worker
        gateway.command = self._command

    def start(self) -> "SocketIngress":
        for worker in list(self.gateway.workers.values()):
            self._start_worker(worker)
        self._spawn_thread(self._accept_loop, "ingress-accept")
        if self.autoscale:
            self._spawn_thread(self._autoscale_loop, "ingress-autoscale")
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(2.0)
        self.listener.close()

    def _spawn_thread(self, target, name, *args) -> None:
        t = threading.Thread(target=target, args=args, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def _start_worker(self, worker: IngressWorker) -> None:
        if worker.worker_id in self._inbox:
            return
        self._inbox[worker.worker_id] = queue.SimpleQueue()
        self._spawn_thread(self._worker_loop, f"ingress-worker-{worker.worker_id}", worker)

    def _command(self, worker: IngressWorker, fn, *args) -> None:
        self._inbox[worker.worker_id].put(("call", fn, args))

    def _accept_loop(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self.listener, selectors.EVENT_READ)
        while not self._stop.is_set():
            if not sel.select(0.05):
                continue
            try:
                sock, peer = self.listener.accept()
            except BlockingIOError:
                continue
            sock.setblocking(True)
            local = sock.getsockname()
            conn = self.gateway.accept((peer[0], peer[1], local[0], local[1]))
            self._inbox[conn.worker_id].put(("adopt", sock, conn))
        sel.close()

    def _autoscale_loop(self) -> None:
        window = self.gateway.autoscaler.config.window_ns / 1e9
        while not self._stop.wait(window):
            self.gateway.autoscale_tick()

    def _worker_loop(self, worker: IngressWorker) -> None:
        sel = selectors.DefaultSelector()
        inbox = self._inbox[worker.worker_id]
        while not self._stop.is_set():
            while True:
                try:
                    msg = inbox.get_nowait()
                except queue.Empty:
                    break
                if msg[0] == "adopt":
                    _, sock, conn = msg
                    conn.transport = _SocketTransport(sock, sel)
                    worker.adopt(conn)
                    sel.register(sock, selectors.EVENT_READ, conn)
                else:
                    _, fn, args = msg
                    fn(*args)
            if sel.get_map():
                events = sel.select(self.idle_s)
            else:
                time.sleep(self.idle_s)
                events = []
            for key, _ in events:
                conn: ClientConn = key.data
                try:
                    data = key.fileobj.recv(65536)
                except OSError:
                    data = b""
                t0 = time.perf_counter_ns()
                if data:
                    worker.on_data(conn, data)
                else:
                    worker.on_client_close(conn)
                    conn.transport.close()
                worker.busy_ns += time.perf_counter_ns() - t0
            while worker.ctx.pending():
                t0 = time.perf_counter_ns()
                worker.poll_one()
                worker.busy_ns += time.perf_counter_ns() - t0
        for key in list(sel.get_map().values()):
            key.fileobj.close()
        sel.close()
