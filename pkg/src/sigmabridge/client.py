"""Insecure-side polling workers.

One worker thread per legacy device. A worker discovers the device's node
structure (or synthesizes one from Modbus register bindings), registers it
with the store, then cyclically reads values into the value map. On any
connection-level failure it reconnects autonomously with a fixed delay equal
to the polling interval, re-running discovery afterwards.
"""

from __future__ import annotations

import enum
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import modbus, snap
from .model import (
    Kind,
    NamespaceTable,
    NodeDescriptor,
    NodeId,
    DataValue,
    StructuralError,
    assemble_browse_path,
    make_store_key,
    normalize_raw,
    validate_alias,
    variant_from_wire,
)
from .store import StoreWriter

log = logging.getLogger(__name__)

OBJECTS_NODE = (0, 85)


class Protocol(enum.Enum):
    SNAP_LEGACY = "snap-legacy"
    MODBUS_TCP = "modbus-tcp"


class Phase(enum.Enum):
    CONNECTING = "connecting"
    DISCOVERING = "discovering"
    POLLING = "polling"
    RECONNECTING = "reconnecting"
    STOPPED = "stopped"


_ALLOWED_TRANSITIONS = {
    (Phase.CONNECTING, Phase.DISCOVERING),
    (Phase.DISCOVERING, Phase.POLLING),
    (Phase.RECONNECTING, Phase.CONNECTING),
    (Phase.CONNECTING, Phase.RECONNECTING),
    (Phase.DISCOVERING, Phase.RECONNECTING),
    (Phase.POLLING, Phase.RECONNECTING),
    (Phase.CONNECTING, Phase.STOPPED),
    (Phase.DISCOVERING, Phase.STOPPED),
    (Phase.POLLING, Phase.STOPPED),
    (Phase.RECONNECTING, Phase.STOPPED),
}


@dataclass
class InsecEndpointConfig:
    alias: str
    protocol: Protocol
    host: str
    port: int
    poll_interval_ms: int = 100
    # SNAP-legacy: explicit NodeId list, or None to auto-discover all
    # browsable variables.
    node_selection: Optional[list] = None
    # Modbus: unit id plus register bindings.
    unit_id: int = 1
    bindings: list = field(default_factory=list)

    def __post_init__(self):
        validate_alias(self.alias)
        if self.poll_interval_ms < 1:
            raise ValueError("pollIntervalMs must be >= 1")


class InternalLatencyRecorder:
    """Collects write-side (dt1) and read-side (dt2) store-boundary latencies.

    dt1 is recorded per key by the polling worker; each secure read pairs its
    dt2 with the most recent dt1 for the same key.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._last_dt1 = {}
        self.samples = []  # (dt1_ns, dt2_ns, tproc_ns)

    def note_write(self, key: str, dt1_ns: int) -> None:
        with self._lock:
            self._last_dt1[key] = dt1_ns

    def note_read(self, key: str, dt2_ns: int) -> None:
        with self._lock:
            dt1 = self._last_dt1.get(key)
            if dt1 is not None:
                self.samples.append((dt1, dt2_ns, dt1 + dt2_ns))


def synthesize_modbus_structure(cfg: InsecEndpointConfig):
    """Build a synthetic node model for a register-only device.

    One namespace "urn:sigma:modbus:<alias>" at index 1; one descriptor per
    binding under Objects/<alias>/Registers/<browseName>.
    """
    table = NamespaceTable(("http://opcfoundation.org/UA/", f"urn:sigma:modbus:{cfg.alias}"))
    seen = set()
    nodes = []
    for binding in cfg.bindings:
        if binding.node_id in seen:
            raise StructuralError(f"duplicate binding node id {binding.node_id} for {cfg.alias}")
        seen.add(binding.node_id)
        nodes.append(NodeDescriptor(
            node_id=binding.node_id,
            display_name=binding.browse_name,
            description=f"Modbus holding register {binding.address}",
            data_type=binding.target_kind,
            browse_name=binding.browse_name,
            browse_path=assemble_browse_path(cfg.alias, ["Registers", binding.browse_name]),
        ))
    return table, nodes


def discover_structure(conn: snap.SnapConnection, cfg: InsecEndpointConfig):
    """Read namespace array, node attributes, and browse paths from a SNAP device."""
    uris = conn.read_namespace_array()
    table = NamespaceTable(tuple(uris))

    if cfg.node_selection is None:
        selected = _browse_all_variables(conn)
    else:
        selected = [(nid, None) for nid in cfg.node_selection]

    nodes = []
    for node_id, known_segments in selected:
        resp = conn.attrs(node_id.ns, node_id.id)
        if not resp.get("ok"):
            raise StructuralError(f"node ({node_id.ns},{node_id.id}) not found on {cfg.alias}: "
                                  f"{resp.get('err')}")
        data_type = resp.get("dataType")
        if data_type is None:
            raise StructuralError(f"node ({node_id.ns},{node_id.id}) on {cfg.alias} has no data type")
        kind = Kind.from_name(data_type)
        segments = known_segments if known_segments is not None else _segments_to_root(conn, node_id)
        nodes.append(NodeDescriptor(
            node_id=node_id,
            display_name=resp.get("displayName", ""),
            description=resp.get("description", ""),
            data_type=kind,
            browse_name=resp.get("browseName", ""),
            browse_path=assemble_browse_path(cfg.alias, segments),
        ))
    return table, nodes


def _segments_to_root(conn: snap.SnapConnection, node_id: NodeId):
    """Walk parent references up to the root folder; segments exclude the root."""
    segments = []
    current = (node_id.ns, node_id.id)
    # First fetch this node's own browse name.
    attrs = conn.attrs(*current)
    if attrs.get("ok"):
        segments.append(attrs.get("browseName", ""))
    hops = 0
    while True:
        resp = conn.browse(*current)
        if not resp.get("ok"):
            raise StructuralError(f"node {current} has no path to the root folder")
        parent = resp.get("parent")
        if parent is None:
            # Reached the root; drop its own segment if we walked onto it.
            if current != (node_id.ns, node_id.id):
                segments.pop()
            return list(reversed(segments))
        if (parent["ns"], parent["id"]) == OBJECTS_NODE:
            return list(reversed(segments))
        segments.append(parent["browseName"])
        current = (parent["ns"], parent["id"])
        hops += 1
        if hops > 256:
            raise StructuralError(f"browse-path traversal for {node_id} exceeds depth 256")


def _browse_all_variables(conn: snap.SnapConnection):
    """Depth-first walk from the Objects folder collecting all variables."""
    out = []

    def walk(node, segments):
        resp = conn.browse(*node)
        if not resp.get("ok"):
            return
        for child in resp.get("children", []):
            child_node = (child["ns"], child["id"])
            child_segments = segments + [child["browseName"]]
            attrs = conn.attrs(*child_node)
            if attrs.get("ok") and attrs.get("dataType") is not None:
                out.append((NodeId(child_node[0], child_node[1]), child_segments))
            else:
                walk(child_node, child_segments)

    walk(OBJECTS_NODE, [])
    return out


class InsecWorker(threading.Thread):
    """Polling worker for one configured legacy device."""

    def __init__(self, cfg: InsecEndpointConfig, writer: StoreWriter,
                 recorder: Optional[InternalLatencyRecorder] = None,
                 connect_timeout: float = 2.0):
        super().__init__(name=f"insec-{cfg.alias}", daemon=True)
        self.cfg = cfg
        self.writer = writer
        self.recorder = recorder
        self.connect_timeout = connect_timeout
        self.phase = Phase.CONNECTING
        self.consecutive_failures = 0
        self.structure_ready = threading.Event()
        self._stop_event = threading.Event()
        self._sock = None
        self._conn = None

    # -- lifecycle ---------------------------------------------------------

    def stop(self):
        self._stop_event.set()
        self._close()
        self.join(timeout=5)
        self._set_phase(Phase.STOPPED)

    def _set_phase(self, phase: Phase):
        if phase is self.phase:
            return
        if (self.phase, phase) not in _ALLOWED_TRANSITIONS:
            log.error("%s: illegal phase transition %s -> %s", self.cfg.alias, self.phase, phase)
        self.phase = phase

    def _close(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def run(self):
        interval = self.cfg.poll_interval_ms / 1000.0
        while not self._stop_event.is_set():
            try:
                self._connect()
                self._set_phase(Phase.DISCOVERING)
                self._discover()
                self._set_phase(Phase.POLLING)
                self._poll_loop()
            except (OSError, ConnectionError, snap.SnapError, modbus.ModbusError) as exc:
                if self._stop_event.is_set():
                    break
                self.consecutive_failures += 1
                log.info("%s: connection lost (%s); reconnecting", self.cfg.alias, exc)
                self._close()
                self._set_phase(Phase.RECONNECTING)
                # Fixed delay equal to the polling interval, retried forever.
                self._stop_event.wait(interval)
                self._set_phase(Phase.CONNECTING)

    def _connect(self):
        self._set_phase(Phase.CONNECTING)
        sock = socket.create_connection((self.cfg.host, self.cfg.port),
                                        timeout=self.connect_timeout)
        sock.settimeout(max(self.connect_timeout, 5 * self.cfg.poll_interval_ms / 1000.0))
        self._sock = sock
        if self.cfg.protocol is Protocol.SNAP_LEGACY:
            self._conn = snap.SnapConnection(sock)

    def _discover(self):
        if self.cfg.protocol is Protocol.SNAP_LEGACY:
            table, nodes = discover_structure(self._conn, self.cfg)
        else:
            table, nodes = synthesize_modbus_structure(self.cfg)
        self.writer.put_structure(self.cfg.alias, table, nodes)
        self._descriptors = nodes
        self.consecutive_failures = 0
        self.structure_ready.set()

    # -- polling -----------------------------------------------------------

    def _poll_loop(self):
        interval = self.cfg.poll_interval_ms / 1000.0
        next_cycle = time.monotonic()
        while not self._stop_event.is_set():
            self._poll_once()
            next_cycle += interval
            now = time.monotonic()
            if next_cycle <= now:
                # Overrun: start the next cycle immediately, no queuing.
                next_cycle = now
            else:
                self._stop_event.wait(next_cycle - now)

    def _poll_once(self):
        if self.cfg.protocol is Protocol.SNAP_LEGACY:
            self._poll_snap()
        else:
            self._poll_modbus()

    def _store(self, key: str, variant, arrival_ns: int):
        value = DataValue(variant=variant, source_timestamp=time.time_ns())
        self.writer.put_value(key, value)
        if self.recorder is not None:
            self.recorder.note_write(key, time.perf_counter_ns() - arrival_ns)

    def _poll_snap(self):
        for desc in self._descriptors:
            resp = self._conn.read(desc.node_id.ns, desc.node_id.id)
            arrival = time.perf_counter_ns()
            if not resp.get("ok"):
                self.consecutive_failures += 1
                log.warning("%s: read (%s,%s) failed: %s", self.cfg.alias,
                            desc.node_id.ns, desc.node_id.id, resp.get("err"))
                continue
            try:
                variant = variant_from_wire(resp["type"], resp["value"])
            except (KeyError, ValueError) as exc:
                self.consecutive_failures += 1
                log.warning("%s: bad value for (%s,%s): %s", self.cfg.alias,
                            desc.node_id.ns, desc.node_id.id, exc)
                continue
            if variant.kind is not desc.data_type:
                variant = normalize_raw(variant.value, desc.data_type)
            self._store(make_store_key(self.cfg.alias, desc.node_id), variant, arrival)

    def _poll_modbus(self):
        self._txn = getattr(self, "_txn", 0)
        for binding in self.cfg.bindings:
            self._txn = (self._txn + 1) & 0xFFFF
            req = modbus.ReadHoldingRegsRequest(binding.address, 1)
            self._sock.sendall(modbus.encode_read_request(self._txn, self.cfg.unit_id, req))
            frame = self._recv_modbus_frame()
            arrival = time.perf_counter_ns()
            result = modbus.decode_response(frame)
            if isinstance(result, modbus.ExceptionResponse):
                self.consecutive_failures += 1
                log.warning("%s: register %d read returned exception %d", self.cfg.alias,
                            binding.address, result.exception_code)
                continue
            try:
                variant = modbus.apply_binding(result.registers[0], binding)
            except ValueError as exc:
                self.consecutive_failures += 1
                log.warning("%s: register %d conversion failed: %s", self.cfg.alias,
                            binding.address, exc)
                continue
            self._store(make_store_key(self.cfg.alias, binding.node_id), variant, arrival)

    def _recv_modbus_frame(self) -> bytes:
        buf = getattr(self, "_mb_buf", None)
        if buf is None:
            buf = self._mb_buf = bytearray()
        while True:
            frame, consumed = modbus.try_decode_adu(buf)
            if frame is not None:
                del buf[:consumed]
                return frame
            data = self._sock.recv(4096)
            if not data:
                raise ConnectionError("modbus peer closed the connection")
            buf.extend(data)
