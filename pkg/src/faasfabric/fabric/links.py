"""Link backends: a virtual-time pipe and a real byte stream."""
from __future__ import annotations

import select
import socket
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from faasfabric.clock import NS_PER_MS, NS_PER_US, SimClock
from faasfabric.fabric.framing import Frame, FrameDecoder, FrameOp


class Backend(str, Enum):
    SIM = "sim"
    SOCKET = "socket"


@dataclass
class LinkCost:
    base_ns: int = 2 * NS_PER_US
    per_byte_ns: float = 5.0
    connect_delay_ns: int = 20 * NS_PER_MS

    def transfer_ns(self, nbytes: int) -> int:
        return self.base_ns + round(self.per_byte_ns * nbytes)


class SimLink:
    """One direction of a node pair; serializes data frames, never drops or reorders."""

    backend = Backend.SIM

    def __init__(self, clock: SimClock, src, dst, cost: LinkCost,
                 deliver: Callable[[object, object, Frame], None]):
        self.clock = clock
        self.src = src
        self.dst = dst
        self.cost = cost
        self._deliver = deliver
        self.busy_until = 0
        self.frames_sent = 0

    def send(self, frame: Frame, nbytes: int) -> int:
        """Queue a frame; returns its arrival time."""
        now = self.clock.now
        if frame.opcode in (FrameOp.ACK, FrameOp.NAK_RNR):
            arrival = now + self.cost.base_ns
        else:
            start = max(now, self.busy_until)
            self.busy_until = start + round(self.cost.per_byte_ns * nbytes)
            arrival = self.busy_until + self.cost.base_ns
        self.frames_sent += 1
        self.clock.call_at(arrival, self._deliver, self.dst, self.src, frame)
        return arrival


class SocketLink:
    """One end of a connected stream socket; written and read by its own node only."""

    backend = Backend.SOCKET

    def __init__(self, sock: socket.socket, src, dst, cost: LinkCost):
        self.sock = sock
        self.src = src
        self.dst = dst
        self.cost = cost
        self.decoder = FrameDecoder()
        self.frames_sent = 0
        sock.setblocking(True)

    def send(self, frame: Frame, nbytes: int) -> None:
        self.sock.sendall(frame.encode())
        self.frames_sent += 1

    def receive(self) -> list[Frame]:
        frames: list[Frame] = []
        while True:
            ready, _, _ = select.select([self.sock], [], [], 0)
            if not ready:
                return frames
            data = self.sock.recv(1 << 16)
            if not data:
                return frames
            frames.extend(self.decoder.feed(data))

    def close(self) -> None:
        self.sock.close()


def socket_link_pair(a, b, cost: LinkCost) -> tuple[SocketLink, SocketLink]:
    """Connected TCP loopback pair: (a's end towards b, b's end towards a)."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    client = socket.create_connection(listener.getsockname())
    server, _ = listener.accept()
    listener.close()
    for s in (client, server):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketLink(client, a, b, cost), SocketLink(server, b, a, cost)
