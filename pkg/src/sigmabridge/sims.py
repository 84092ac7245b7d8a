"""Simulated legacy devices for tests and benchmarks.

Two device types: a Modbus/TCP cooling system (temperature + fan speed
holding registers) and a plaintext-SNAP PLC with a declarative node tree.
Value generators are deterministic given seed and time, quantized to a fixed
update tick, so runs are reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import modbus, snap
from .model import Kind, NodeId, variant_to_wire, normalize_raw

log = logging.getLogger(__name__)

DEFAULT_MODBUS_PORT = 1502
DEFAULT_LEGACY_PORT = 14840
DEFAULT_TICK_S = 0.05


# -- generators ------------------------------------------------------------

def const(value) -> Callable[[float], object]:
    return lambda t: value


def sine(lo: float, hi: float, period_s: float = 60.0):
    """Slow sinusoid between lo and hi."""
    def gen(t: float):
        return lo + (hi - lo) * (0.5 + 0.5 * math.sin(2 * math.pi * t / period_s))
    return gen


def ramp(start: float, rate_per_s: float, cap: Optional[float] = None):
    def gen(t: float):
        v = start + rate_per_s * t
        return min(v, cap) if cap is not None else v
    return gen


def seeded_noise(seed: int, lo: int, hi: int):
    """Deterministic pseudo-random integer per quantized time step."""
    def gen(t: float):
        return random.Random((seed << 32) ^ round(t * 1000)).randint(lo, hi)
    return gen


def generator_from_spec(spec: dict, seed: int):
    kind = spec.get("kind", "const")
    if kind == "const":
        return const(spec["value"])
    if kind == "sine":
        return sine(spec["lo"], spec["hi"], spec.get("periodS", 60.0))
    if kind == "ramp":
        return ramp(spec["start"], spec["ratePerS"], spec.get("cap"))
    if kind == "noise":
        return seeded_noise(seed, spec["lo"], spec["hi"])
    raise ValueError(f"unknown generator kind {kind!r}")


# -- fixtures --------------------------------------------------------------

@dataclass
class ModbusFixture:
    """Register map: address -> generator of raw u16 values."""

    registers: dict
    tick_s: float = DEFAULT_TICK_S


def default_cooling_fixture(seed: int = 1, overheat: bool = False) -> ModbusFixture:
    """Register 0: temperature in tenths of a degree C; register 1: fan RPM."""
    if overheat:
        temp = ramp(300.0, 10.0, cap=950.0)  # tenths: ramps past 80 C
    else:
        temp = sine(200.0, 300.0, period_s=120.0)
    rpm = sine(1100.0, 1300.0, period_s=90.0)
    return ModbusFixture(registers={
        0: lambda t: int(round(temp(t))) & 0xFFFF,
        1: lambda t: int(round(rpm(t))) & 0xFFFF,
    })


@dataclass
class SimVariable:
    """One variable in a legacy node tree; path is device-local ("Machine/Temp")."""

    path: str
    node_id: NodeId
    kind: Kind
    generator: Callable[[float], object]
    display_name: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.display_name:
            self.display_name = self.path.rsplit("/", 1)[-1]

    @property
    def browse_name(self) -> str:
        return self.path.rsplit("/", 1)[-1]


@dataclass
class LegacyFixture:
    """Namespace URIs plus a flat list of variables; folders come from paths."""

    namespaces: list
    variables: list
    tick_s: float = DEFAULT_TICK_S

    @classmethod
    def from_json(cls, path: Path, seed: int = 1) -> "LegacyFixture":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        variables = []
        for obj in doc["nodes"]:
            ident = obj["id"]
            variables.append(SimVariable(
                path=obj["path"],
                node_id=NodeId(obj["ns"], ident),
                kind=Kind.from_name(obj["dataType"]),
                generator=generator_from_spec(obj.get("generator", {"kind": "const", "value": 0}),
                                              seed),
                display_name=obj.get("displayName", ""),
                description=obj.get("description", ""),
            ))
        return cls(namespaces=list(doc["namespaces"]), variables=variables,
                   tick_s=doc.get("tickS", DEFAULT_TICK_S))


def default_plc_fixture() -> LegacyFixture:
    return LegacyFixture(
        namespaces=["http://opcfoundation.org/UA/", "urn:sim:plc21"],
        variables=[
            SimVariable("Machine/Temp", NodeId(2, 1001), Kind.DOUBLE,
                        sine(20.0, 30.0, period_s=120.0), description="Barrel temperature"),
            SimVariable("Machine/Speed", NodeId(2, 1002), Kind.INT32,
                        lambda t: int(round(sine(800, 1200, 90.0)(t))),
                        description="Screw speed"),
        ],
    )


def modbus_fixture_from_json(path: Path, seed: int = 1) -> ModbusFixture:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    regs = {}
    for obj in doc["registers"]:
        regs[int(obj["address"])] = generator_from_spec(obj["generator"], seed)
    return ModbusFixture(registers=regs, tick_s=doc.get("tickS", DEFAULT_TICK_S))


# -- server plumbing -------------------------------------------------------

class _TcpServer:
    """Minimal threaded accept loop shared by both simulators."""

    def __init__(self, port: int):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", port))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._threads = []
        self._conns = []
        self._conn_lock = threading.Lock()
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
        with self._conn_lock:
            for conn in self._conns:
                try:
                    conn.close()
                except OSError:
                    pass
        self._accept_thread.join(timeout=2)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.append(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn):  # pragma: no cover - overridden
        raise NotImplementedError


class ModbusCoolingSim(_TcpServer):
    """Modbus/TCP server answering FC 0x03 for the fixture's register map."""

    def __init__(self, port: int = 0, fixture: Optional[ModbusFixture] = None, seed: int = 1):
        super().__init__(port)
        self.fixture = fixture if fixture is not None else default_cooling_fixture(seed)
        self._t0 = time.monotonic()

    def _quantized_t(self) -> float:
        elapsed = time.monotonic() - self._t0
        tick = self.fixture.tick_s
        return math.floor(elapsed / tick) * tick

    def register_value(self, address: int) -> int:
        return int(self.fixture.registers[address](self._quantized_t())) & 0xFFFF

    def _serve_conn(self, conn):
        buf = bytearray()
        try:
            while not self._stop.is_set():
                data = conn.recv(4096)
                if not data:
                    return
                buf.extend(data)
                while True:
                    try:
                        frame, consumed = modbus.try_decode_adu(buf)
                    except modbus.ModbusProtocolViolation:
                        return
                    if frame is None:
                        break
                    del buf[:consumed]
                    conn.sendall(self._respond(frame))
        except OSError:
            return
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _respond(self, frame: bytes) -> bytes:
        try:
            header, fc, body = modbus.decode_request(frame)
        except modbus.ModbusProtocolViolation:
            return b""
        if fc != modbus.FC_READ_HOLDING_REGISTERS:
            return modbus.encode_exception(header.transaction_id, header.unit_id, fc,
                                           modbus.EXC_ILLEGAL_FUNCTION)
        try:
            _, req = modbus.decode_read_request(frame)
        except (modbus.ModbusProtocolViolation, modbus.ModbusEncodeError):
            return modbus.encode_exception(header.transaction_id, header.unit_id, fc,
                                           modbus.EXC_ILLEGAL_DATA_VALUE)
        addresses = range(req.start_address, req.start_address + req.quantity)
        if any(a not in self.fixture.registers for a in addresses):
            return modbus.encode_exception(header.transaction_id, header.unit_id, fc,
                                           modbus.EXC_ILLEGAL_DATA_ADDRESS)
        regs = [self.register_value(a) for a in addresses]
        return modbus.encode_read_response(header.transaction_id, header.unit_id, regs)


@dataclass
class _SimFolder:
    path: str
    node_id: NodeId
    parent: Optional[str]
    children: list = field(default_factory=list)  # (NodeId, browse_name)


class LegacyNodeSim(_TcpServer):
    """Plaintext SNAP server exposing the fixture's node tree; no authentication."""

    def __init__(self, port: int = 0, fixture: Optional[LegacyFixture] = None, seed: int = 1):
        super().__init__(port)
        self.fixture = fixture if fixture is not None else default_plc_fixture()
        self._t0 = time.monotonic()
        self._build_tree()
        # Optional hook fired as (variant_value, monotonic_ts) right before a
        # freshly generated value is handed to the transport.
        self.on_value_generated: Optional[Callable[[object, float], None]] = None

    def _build_tree(self):
        root = _SimFolder("", NodeId(0, 85), None)
        self._root_id = root.node_id
        self._folders = {"": root}
        self._vars_by_node = {}
        folder_ns = next(
            (i for i, u in enumerate(self.fixture.namespaces) if i > 0), 1
        )
        for var in self.fixture.variables:
            parts = var.path.split("/")
            parent_path = ""
            for i in range(len(parts) - 1):
                path = "/".join(parts[: i + 1])
                if path not in self._folders:
                    folder = _SimFolder(path, NodeId(folder_ns, f"f:{path}"), parent_path)
                    self._folders[path] = folder
                    self._folders[parent_path].children.append((folder.node_id, parts[i]))
                parent_path = path
            self._folders[parent_path].children.append((var.node_id, var.browse_name))
            key = (var.node_id.ns, var.node_id.id)
            if key in self._vars_by_node:
                raise ValueError(f"duplicate node id {key} in fixture")
            self._vars_by_node[key] = (var, parent_path)
        self._folders_by_node = {
            (f.node_id.ns, f.node_id.id): f for f in self._folders.values()
        }

    def _quantized_t(self) -> float:
        tick = self.fixture.tick_s
        elapsed = time.monotonic() - self._t0
        return math.floor(elapsed / tick) * tick

    def current_value(self, var: SimVariable):
        raw = var.generator(self._quantized_t())
        return normalize_raw(raw, var.kind)

    def _serve_conn(self, conn):
        decoder = snap.FrameDecoder()
        try:
            while not self._stop.is_set():
                data = conn.recv(65536)
                if not data:
                    return
                try:
                    frames = decoder.feed(data)
                except snap.SnapProtocolViolation:
                    return
                except snap.SnapMalformed:
                    conn.sendall(snap.encode_frame(snap.err_response(0, snap.BAD_MALFORMED)))
                    continue
                for frame in frames:
                    conn.sendall(snap.encode_frame(self._respond(frame)))
        except OSError:
            return
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _respond(self, frame: dict) -> dict:
        rid = frame.get("rid", 0)
        op = frame.get("op")
        if op == "hello":
            return snap.ok_response(rid, {})
        if op in ("read", "attrs", "browse"):
            try:
                node = (int(frame["ns"]), frame["id"])
            except (KeyError, TypeError, ValueError):
                return snap.err_response(rid, snap.BAD_MALFORMED)
            if op == "read":
                return self._handle_read(rid, node)
            if op == "attrs":
                return self._handle_attrs(rid, node)
            return self._handle_browse(rid, node)
        return snap.err_response(rid, snap.BAD_MALFORMED)

    def _handle_read(self, rid: int, node) -> dict:
        if node == (0, 2255):
            return snap.ok_response(rid, {"type": "StringArray",
                                          "value": list(self.fixture.namespaces)})
        entry = self._vars_by_node.get(node)
        if entry is None:
            return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)
        var, _ = entry
        variant = self.current_value(var)
        ts = time.time_ns()
        if self.on_value_generated is not None:
            self.on_value_generated(variant.value, time.monotonic())
        return snap.ok_response(rid, {
            "type": variant.kind.value,
            "value": variant_to_wire(variant),
            "ts": ts,
        })

    def _handle_attrs(self, rid: int, node) -> dict:
        entry = self._vars_by_node.get(node)
        if entry is not None:
            var, _ = entry
            return snap.ok_response(rid, {
                "displayName": var.display_name,
                "description": var.description,
                "dataType": var.kind.value,
                "browseName": var.browse_name,
            })
        folder = self._folders_by_node.get(node)
        if folder is not None:
            name = "Objects" if folder.path == "" else folder.path.rsplit("/", 1)[-1]
            return snap.ok_response(rid, {
                "displayName": name,
                "description": "",
                "dataType": None,
                "browseName": name,
            })
        return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)

    def _handle_browse(self, rid: int, node) -> dict:
        def ref(node_id: NodeId, browse_name: str) -> dict:
            return {"ns": node_id.ns, "id": node_id.id, "browseName": browse_name}

        folder = self._folders_by_node.get(node)
        if folder is not None:
            if folder.parent is None:
                parent = None
            else:
                pf = self._folders[folder.parent]
                pname = "Objects" if pf.path == "" else pf.path.rsplit("/", 1)[-1]
                parent = ref(pf.node_id, pname)
            children = [ref(nid, name) for nid, name in folder.children]
            return snap.ok_response(rid, {"parent": parent, "children": children})
        entry = self._vars_by_node.get(node)
        if entry is not None:
            var, parent_path = entry
            pf = self._folders[parent_path]
            pname = "Objects" if pf.path == "" else pf.path.rsplit("/", 1)[-1]
            return snap.ok_response(rid, {"parent": ref(pf.node_id, pname), "children": []})
        return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)
