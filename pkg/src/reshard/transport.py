"""Length-prefixed request/response protocol for reaching peer tensor stores.

Frame layout (both directions)::

    u32-LE header length | UTF-8 header | u64-LE payload length | payload

Request headers read ``VERB <path> [range=<spec>]``; response headers read
``STATUS [detail]``. Tensor payloads are PTX1-encoded. One request per
connection.

Endpoints are ``tcp://host:port`` or ``inproc://name``. In-process endpoints
use ``socket.socketpair`` so both kinds run over a real byte stream.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

from .errors import (
    BadRange,
    ConnectionFailed,
    MalformedFrame,
    NotFound,
    RangeOutOfBounds,
    RankMismatch,
    RemoteError,
    ReshardError,
    UnknownVerb,
)
from .tensor import Range, Tensor, format_range_spec, from_ptx, parse_range_spec, ptx_header_size, to_ptx

log = logging.getLogger(__name__)

VERBS = ("QUERY", "UPLOAD", "LIST")
STATUSES = ("OK", "NOT_FOUND", "BAD_RANGE", "ERROR")
MAX_HEADER = 1 << 16
RETRIES = 3
BACKOFF = 0.1


@dataclass(frozen=True)
class Request:
    verb: str
    path: str
    range: Optional[tuple] = None  # spec tuple, None bounds mean open
    payload: Optional[bytes] = None

    def __post_init__(self):
        if self.payload == b"":
            object.__setattr__(self, "payload", None)
        if self.verb not in VERBS:
            raise UnknownVerb(f"unknown verb {self.verb!r}")
        if not self.path.startswith("/") or any(c.isspace() for c in self.path):
            raise MalformedFrame(f"bad path {self.path!r}")
        if (self.verb == "UPLOAD") != (self.payload is not None):
            raise MalformedFrame(f"{self.verb} {'needs' if self.verb == 'UPLOAD' else 'takes no'} payload")
        if self.range is not None:
            if isinstance(self.range, Range):
                object.__setattr__(self, "range", self.range.bounds)
            elif isinstance(self.range, str):
                object.__setattr__(self, "range", parse_range_spec(self.range))
            else:
                object.__setattr__(self, "range", tuple((lo, hi) for lo, hi in self.range))

    def header(self) -> str:
        h = f"{self.verb} {self.path}"
        if self.range is not None:
            h += f" range={format_range_spec(self.range)}"
        return h


@dataclass(frozen=True)
class Response:
    status: str
    payload: Optional[bytes] = None
    detail: str = ""

    def __post_init__(self):
        if self.payload == b"":
            object.__setattr__(self, "payload", None)
        if self.status not in STATUSES:
            raise MalformedFrame(f"unknown status {self.status!r}")
        if "\n" in self.detail:
            raise MalformedFrame("detail must be a single line")

    def header(self) -> str:
        return f"{self.status} {self.detail}" if self.detail else self.status


def _frame(header: str, payload: Optional[bytes]) -> bytes:
    h = header.encode("utf-8")
    body = payload or b""
    return struct.pack("<I", len(h)) + h + struct.pack("<Q", len(body)) + body


def _unframe(data: bytes) -> tuple:
    if len(data) < 4:
        raise MalformedFrame("truncated header length")
    (hlen,) = struct.unpack_from("<I", data, 0)
    if hlen > MAX_HEADER:
        raise MalformedFrame(f"header length {hlen} too large")
    if len(data) < 4 + hlen + 8:
        raise MalformedFrame("truncated header")
    try:
        header = data[4:4 + hlen].decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedFrame("header is not UTF-8") from None
    (plen,) = struct.unpack_from("<Q", data, 4 + hlen)
    start = 4 + hlen + 8
    if len(data) < start + plen:
        raise MalformedFrame("truncated payload")
    # zero-length payload and no payload are the same thing on the wire
    payload, end = (bytes(data[start:start + plen]) or None), start + plen
    if end != len(data):
        raise MalformedFrame(f"{len(data) - end} trailing bytes")
    return header, payload


def encode_request(req: Request) -> bytes:
    return _frame(req.header(), req.payload)


def decode_request(data: bytes) -> Request:
    header, payload = _unframe(data)
    parts = header.split(" ")
    if len(parts) not in (2, 3) or not parts[0]:
        raise MalformedFrame(f"bad request header {header!r}")
    verb, path = parts[0], parts[1]
    if verb not in VERBS:
        raise UnknownVerb(f"unknown verb {verb!r}")
    rng = None
    if len(parts) == 3:
        if not parts[2].startswith("range="):
            raise MalformedFrame(f"unexpected header field {parts[2]!r}")
        try:
            rng = parse_range_spec(parts[2][len("range="):])
        except ValueError as e:
            raise MalformedFrame(str(e)) from None
    return Request(verb, path, rng, payload)


def encode_response(resp: Response) -> bytes:
    return _frame(resp.header(), resp.payload)


def decode_response(data: bytes) -> Response:
    header, payload = _unframe(data)
    status, _, detail = header.partition(" ")
    return Response(status, payload, detail)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise MalformedFrame(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> bytes:
    """Read one whole frame off a stream socket and return its raw bytes."""
    head = _recv_exact(sock, 4)
    (hlen,) = struct.unpack("<I", head)
    if hlen > MAX_HEADER:
        raise MalformedFrame(f"header length {hlen} too large")
    rest = _recv_exact(sock, hlen + 8)
    (plen,) = struct.unpack_from("<Q", rest, hlen)
    body = _recv_exact(sock, plen) if plen else b""
    return head + rest + body


# --- server -------------------------------------------------------------------

def handle(store, req: Request) -> Response:
    try:
        if req.verb == "QUERY":
            t = store.query(req.path, req.range)
            return Response("OK", to_ptx(t))
        if req.verb == "UPLOAD":
            v = store.upload(req.path, from_ptx(req.payload))
            return Response("OK", None, f"version={v}")
        names = store.list(req.path)
        return Response("OK", "\n".join(names).encode("utf-8"))
    except NotFound as e:
        return Response("NOT_FOUND", None, str(e))
    except (RangeOutOfBounds, RankMismatch) as e:
        return Response("BAD_RANGE", None, str(e))
    except (ReshardError, ValueError) as e:
        return Response("ERROR", None, f"{type(e).__name__}: {e}".replace("\n", " "))


def serve_connection(store, sock) -> None:
    try:
        raw = read_frame(sock)
        try:
            resp = handle(store, decode_request(raw))
        except MalformedFrame as e:
            resp = Response("ERROR", None, f"{type(e).__name__}: {e}")
        sock.sendall(encode_response(resp))
    except (OSError, MalformedFrame) as e:
        log.debug("connection dropped: %s", e)
    finally:
        sock.close()


_INPROC = {}
_INPROC_LOCK = threading.Lock()


class InprocListener:
    def __init__(self, store, name: str):
        self.store = store
        self.name = name
        self.endpoint = f"inproc://{name}"
        with _INPROC_LOCK:
            if name in _INPROC:
                raise OSError(f"inproc endpoint {name} already bound")
            _INPROC[name] = self

    def accept(self):
        client, server = socket.socketpair()
        threading.Thread(target=serve_connection, args=(self.store, server), daemon=True).start()
        return client

    def close(self):
        with _INPROC_LOCK:
            if _INPROC.get(self.name) is self:
                del _INPROC[self.name]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        serve_connection(self.server.store, self.request)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def shutdown_request(self, request):
        pass  # serve_connection closes the socket itself


class TCPListener:
    def __init__(self, store, host: str = "127.0.0.1", port: int = 0):
        self.server = _TCPServer((host, port), _Handler)
        self.server.store = store
        h, p = self.server.server_address[:2]
        self.endpoint = f"tcp://{h}:{p}"
        self._thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


def serve(store, endpoint: str = "tcp://127.0.0.1:0"):
    """Start serving ``store`` and return a listener with ``.endpoint`` and ``.close()``."""
    if endpoint.startswith("inproc://"):
        return InprocListener(store, endpoint[len("inproc://"):])
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        return TCPListener(store, host or "127.0.0.1", int(port or 0))
    raise ValueError(f"unsupported endpoint {endpoint!r}")


# --- client -------------------------------------------------------------------

def _connect(endpoint: str, timeout: float):
    if endpoint.startswith("inproc://"):
        lst = _INPROC.get(endpoint[len("inproc://"):])
        if lst is None:
            raise ConnectionRefusedError(f"nothing bound at {endpoint}")
        return lst.accept()
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        return socket.create_connection((host, int(port)), timeout=timeout)
    raise ValueError(f"unsupported endpoint {endpoint!r}")


class Client:
    """Issues requests with retry and keeps byte counters.

    ``payload_bytes`` counts tensor element bytes received by QUERY and sent
    by UPLOAD; ``wire_bytes`` counts every byte in both directions.
    """

    def __init__(self, retries: int = RETRIES, backoff: float = BACKOFF, timeout: float = 30.0):
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._lock = threading.Lock()
        self.payload_bytes = 0
        self.wire_bytes = 0
        self.requests = 0

    def _account(self, payload: int, wire: int):
        with self._lock:
            self.payload_bytes += payload
            self.wire_bytes += wire
            self.requests += 1

    def request(self, endpoint: str, req: Request) -> tuple:
        """Send ``req``; return ``(response, wire bytes sent + received)``."""
        data = encode_request(req)
        last = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff)
            try:
                sock = _connect(endpoint, self.timeout)
            except OSError as e:
                last = e
                continue
            try:
                sock.sendall(data)
                raw = read_frame(sock)
            except (OSError, MalformedFrame) as e:
                last = e
                continue
            finally:
                sock.close()
            return decode_response(raw), len(data) + len(raw)
        raise ConnectionFailed(f"{endpoint}: {last} (after {self.retries} attempts)")

    def fetch(self, endpoint: str, path: str, range=None) -> Tensor:
        resp, wire = self.request(endpoint, Request("QUERY", path, range))
        _raise_for(resp, path)
        t = from_ptx(resp.payload)
        self._account(t.nbytes, wire)
        return t

    def upload(self, endpoint: str, path: str, t: Tensor) -> int:
        resp, wire = self.request(endpoint, Request("UPLOAD", path, None, to_ptx(t)))
        _raise_for(resp, path)
        self._account(t.nbytes, wire)
        return int(resp.detail.partition("=")[2])

    def list(self, endpoint: str, path: str = "/") -> list:
        resp, wire = self.request(endpoint, Request("LIST", path))
        _raise_for(resp, path)
        self._account(0, wire)
        text = (resp.payload or b"").decode("utf-8")
        return text.split("\n") if text else []


def _raise_for(resp: Response, path: str) -> None:
    if resp.status == "OK":
        return
    if resp.status == "NOT_FOUND":
        raise NotFound(resp.detail or path)
    if resp.status == "BAD_RANGE":
        raise BadRange(resp.detail)
    raise RemoteError(resp.detail)


def framing_overhead(req: Request, tensor_rank: int) -> int:
    """Fixed bytes a QUERY round trip adds on top of the tensor payload."""
    return len(encode_request(req)) + 4 + len("OK") + 8 + ptx_header_size(tensor_rank)


def fetch(endpoint: str, path: str, range=None, client: Optional[Client] = None) -> Tensor:
    return (client or Client()).fetch(endpoint, path, range)
