"""Simple Node Access Protocol (SNAP).

Length-prefixed JSON frames carrying OPC-UA-style semantics: namespace
tables, (ns, id) addressed nodes, typed scalar values, attribute reads,
browse traversal, and periodic notifications. The same codec runs plaintext
on the legacy side and over TLS on the secure side.

Frames are compact JSON with a fixed key order per message type so encodings
are byte-reproducible.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from typing import Optional

MAX_FRAME = 1 << 20  # 1 MiB

OPS = ("hello", "read", "attrs", "browse", "subscribe")

BAD_NODE_UNKNOWN = "BAD_NODE_UNKNOWN"
BAD_NOT_READY = "BAD_NOT_READY"
BAD_AUTH = "BAD_AUTH"
BAD_MALFORMED = "BAD_MALFORMED"


class SnapError(Exception):
    pass


class SnapEncodeError(SnapError):
    pass


class SnapProtocolViolation(SnapError):
    """Unrecoverable framing error; the connection must close."""


class SnapMalformed(SnapError):
    """Body is not valid UTF-8 JSON; answered with BAD_MALFORMED."""


def encode_frame(body: dict) -> bytes:
    """4-byte big-endian length prefix followed by the compact JSON body."""
    payload = json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise SnapEncodeError(f"frame body of {len(payload)} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", len(payload)) + payload


def try_decode(buf) -> tuple:
    """Decode one frame from the front of `buf`.

    Returns (object, consumed) for a complete frame, (None, 0) when more
    bytes are needed.
    """
    if len(buf) < 4:
        return None, 0
    (length,) = struct.unpack(">I", bytes(buf[:4]))
    if length > MAX_FRAME:
        raise SnapProtocolViolation(f"declared frame length {length} exceeds {MAX_FRAME}")
    if len(buf) < 4 + length:
        return None, 0
    raw = bytes(buf[4 : 4 + length])
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapMalformed(str(exc)) from exc
    if not isinstance(obj, dict):
        raise SnapMalformed("frame body is not a JSON object")
    return obj, 4 + length


class FrameDecoder:
    """Incremental decoder over an arbitrary byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)
        out = []
        while True:
            obj, consumed = try_decode(self._buf)
            if obj is None:
                return out
            del self._buf[:consumed]
            out.append(obj)


# -- message builders (fixed key order) -----------------------------------

def make_hello(rid: int, user: str, password: str) -> dict:
    return {"op": "hello", "rid": rid, "user": user, "pass": password}


def make_read(rid: int, ns: int, ident) -> dict:
    return {"op": "read", "rid": rid, "ns": ns, "id": ident}


def make_attrs(rid: int, ns: int, ident) -> dict:
    return {"op": "attrs", "rid": rid, "ns": ns, "id": ident}


def make_browse(rid: int, ns: int, ident) -> dict:
    return {"op": "browse", "rid": rid, "ns": ns, "id": ident}


def make_subscribe(rid: int, interval_ms: int) -> dict:
    return {"op": "subscribe", "rid": rid, "interval_ms": interval_ms}


def ok_response(rid: int, payload: dict) -> dict:
    out = {"rid": rid, "ok": True}
    out.update(payload)
    return out


def err_response(rid: int, code: str) -> dict:
    return {"rid": rid, "ok": False, "err": code}


# -- blocking connection helper -------------------------------------------

class SnapConnection:
    """Client side of one SNAP connection (plaintext or TLS-wrapped socket).

    Requests are issued sequentially; rids increase strictly. Unsolicited
    notify messages received while waiting for a response are queued.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._decoder = FrameDecoder()
        self._rid = 0
        self._pending_notifies = []
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0, ssl_context=None,
                server_hostname: Optional[str] = None) -> "SnapConnection":
        sock = socket.create_connection((host, port), timeout=timeout)
        if ssl_context is not None:
            sock = ssl_context.wrap_socket(sock, server_hostname=server_hostname or host)
        return cls(sock)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass

    def _next_frame(self) -> dict:
        while True:
            data = self._sock.recv(65536)
            if not data:
                raise ConnectionError("SNAP peer closed the connection")
            frames = self._decoder.feed(data)
            if frames:
                self._pending_notifies.extend(frames[1:])
                return frames[0]

    def _take_frame(self) -> dict:
        if self._pending_notifies:
            return self._pending_notifies.pop(0)
        return self._next_frame()

    def request(self, message: dict) -> dict:
        with self._lock:
            self._sock.sendall(encode_frame(message))
            while True:
                frame = self._take_frame()
                if "notify" in frame and "rid" not in frame:
                    self._pending_notifies.append(frame)
                    frame = self._next_frame()
                    continue
                if frame.get("rid") != message["rid"]:
                    raise SnapProtocolViolation(
                        f"response rid {frame.get('rid')!r} does not echo request rid {message['rid']}"
                    )
                return frame

    def _rid_next(self) -> int:
        self._rid += 1
        return self._rid

    def hello(self, user: str, password: str) -> dict:
        return self.request(make_hello(self._rid_next(), user, password))

    def read(self, ns: int, ident) -> dict:
        return self.request(make_read(self._rid_next(), ns, ident))

    def attrs(self, ns: int, ident) -> dict:
        return self.request(make_attrs(self._rid_next(), ns, ident))

    def browse(self, ns: int, ident) -> dict:
        return self.request(make_browse(self._rid_next(), ns, ident))

    def subscribe(self, interval_ms: int) -> dict:
        return self.request(make_subscribe(self._rid_next(), interval_ms))

    def next_notify(self, timeout: Optional[float] = None) -> dict:
        """Block until the next notify message arrives."""
        with self._lock:
            if timeout is not None:
                self._sock.settimeout(timeout)
            for i, frame in enumerate(self._pending_notifies):
                if "notify" in frame:
                    return self._pending_notifies.pop(i)
            while True:
                frame = self._next_frame()
                if "notify" in frame:
                    return frame
                self._pending_notifies.append(frame)

    def read_namespace_array(self) -> list:
        """Read the namespace URI array exposed at standard node (0, 2255)."""
        resp = self.read(0, 2255)
        if not resp.get("ok"):
            raise SnapError(f"namespace array read failed: {resp.get('err')}")
        if resp.get("type") != "StringArray":
            raise SnapProtocolViolation("node (0,2255) did not return a StringArray")
        return list(resp["value"])
