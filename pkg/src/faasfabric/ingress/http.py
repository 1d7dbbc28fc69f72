"""HTTP/1.1 framing for the gateway: GET/POST, Content-Length bodies, keep-alive.

Parsing is delegated to h11; this module narrows it to the supported subset and
turns its events into complete requests or status-coded errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import h11

from faasfabric.errors import HttpError

METHODS = (b"GET", b"POST")
REASONS = {200: b"OK", 400: b"Bad Request", 404: b"Not Found", 503: b"Service Unavailable"}


@dataclass
class HttpRequest:
    method: str
    path: str
    headers: dict
    body: bytes
    keep_alive: bool


def _header(headers, name: bytes):
    for k, v in headers:
        if k == name:
            return v
    return None


class ServerConnection:
    """One client connection's parser and response writer."""

    def __init__(self, max_body: int):
        self.max_body = max_body
        self.conn = h11.Connection(h11.SERVER)
        self._req: h11.Request | None = None
        self._body: list[bytes] = []
        self.closed = False

    def feed(self, data: bytes) -> None:
        self.conn.receive_data(data)

    def next_request(self) -> HttpRequest | None:
        """The next complete request, None when more bytes are needed or a
        response is still owed. Raises HttpError for requests outside the subset."""
        while True:
            try:
                ev = self.conn.next_event()
            except h11.RemoteProtocolError as exc:
                raise HttpError(400, f"malformed request: {exc}") from None
            if ev is h11.NEED_DATA or ev is h11.PAUSED:
                return None
            if isinstance(ev, h11.Request):
                if ev.method not in METHODS:
                    raise HttpError(400, f"unsupported method {ev.method.decode()}")
                if _header(ev.headers, b"transfer-encoding") is not None:
                    raise HttpError(400, "chunked bodies are not supported")
                length = int(_header(ev.headers, b"content-length") or 0)
                if length > self.max_body:
                    raise HttpError(400, f"oversize body: {length} > {self.max_body}")
                self._req, self._body = ev, []
            elif isinstance(ev, h11.Data):
                self._body.append(bytes(ev.data))
            elif isinstance(ev, h11.EndOfMessage):
                req = self._req
                self._req = None
                headers = {k.decode(): v.decode("latin-1") for k, v in req.headers}
                return HttpRequest(req.method.decode(), req.target.decode("latin-1").split("?", 1)[0],
                                   headers, b"".join(self._body), self._keep_alive(req))
            elif isinstance(ev, h11.ConnectionClosed):
                self.closed = True
                return None

    def _keep_alive(self, req: h11.Request) -> bool:
        conn = (_header(req.headers, b"connection") or b"").lower()
        if req.http_version == b"1.0":
            return conn == b"keep-alive"
        return conn != b"close"

    def respond(self, status: int, body: bytes, close: bool = False) -> bytes:
        """Serialized response; re-arms the parser for the next keep-alive request."""
        headers = [("Content-Length", str(len(body)))]
        if close:
            headers.append(("Connection", "close"))
        try:
            out = self.conn.send(h11.Response(status_code=status, headers=headers,
                                              reason=REASONS.get(status, b"")))
            out += self.conn.send(h11.Data(data=body)) if body else b""
            out += self.conn.send(h11.EndOfMessage())
        except h11.LocalProtocolError:
            # parser is in an error state; answer and give up on the connection
            self.closed = True
            return raw_response(status, body, close=True)
        if self.conn.our_state is h11.MUST_CLOSE or close:
            self.closed = True
        elif self.conn.our_state is h11.DONE and self.conn.their_state is h11.DONE:
            self.conn.start_next_cycle()
        return out

    def fail(self, err: HttpError) -> bytes:
        self.closed = True
        return raw_response(err.status, err.reason.encode(), close=True)


def raw_response(status: int, body: bytes, close: bool = False) -> bytes:
    head = [b"HTTP/1.1 %d %s" % (status, REASONS.get(status, b"")),
            b"Content-Length: %d" % len(body)]
    if close:
        head.append(b"Connection: close")
    return b"\r\n".join(head) + b"\r\n\r\n" + body


@dataclass
class HttpResponse:
    status: int
    body: bytes
    close: bool


class ClientConnection:
    """Client-side framing used by the load generator and tests."""

    def __init__(self):
        self.conn = h11.Connection(h11.CLIENT)
        self._status = None
        self._body: list[bytes] = []
        self._close = False

    def request(self, method: str, path: str, body: bytes = b"", keep_alive: bool = True) -> bytes:
        headers = [("Host", "faasfabric"), ("Content-Length", str(len(body)))]
        if not keep_alive:
            headers.append(("Connection", "close"))
        out = self.conn.send(h11.Request(method=method, target=path, headers=headers))
        if body:
            out += self.conn.send(h11.Data(data=body))
        return out + self.conn.send(h11.EndOfMessage())

    def feed(self, data: bytes) -> list[HttpResponse]:
        self.conn.receive_data(data)
        out = []
        while True:
            ev = self.conn.next_event()
            if ev is h11.NEED_DATA or ev is h11.PAUSED or isinstance(ev, h11.ConnectionClosed):
                return out
            if isinstance(ev, h11.Response):
                self._status, self._body = ev.status_code, []
                self._close = (_header(ev.headers, b"connection") or b"").lower() == b"close"
            elif isinstance(ev, h11.Data):
                self._body.append(bytes(ev.data))
            elif isinstance(ev, h11.EndOfMessage):
                out.append(HttpResponse(self._status, b"".join(self._body), self._close))
                if self.conn.our_state is h11.DONE and self.conn.their_state is h11.DONE:
                    self.conn.start_next_cycle()
