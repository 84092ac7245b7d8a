"""Secure per-device SNAP endpoints.

Each server rebuilds one device's address space from a store snapshot,
serves authenticated reads over TLS on its own dedicated port, and
optionally publishes periodic notifications. The server's only data source
is the store's reader handle; it never opens a connection toward the legacy
network.
"""

from __future__ import annotations

import collections
import enum
import logging
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import snap
from .client import InternalLatencyRecorder
from .model import (
    Kind,
    NodeId,
    StructuralError,
    make_store_key,
    variant_to_wire,
    STANDARD_NAMESPACE_URI,
)
from .store import StoreReader

log = logging.getLogger(__name__)


class ServerMode(enum.Enum):
    CLIENT_SERVER = "client-server"
    PUB_SUB = "pub-sub"


class AuthMethod(enum.Enum):
    USER_PASS = "userpass"
    CLIENT_CERT = "clientcert"


@dataclass
class SecServerConfig:
    alias: str
    port: int
    tls_cert: str
    tls_key: str
    mode: ServerMode = ServerMode.CLIENT_SERVER
    publish_interval_ms: int = 100
    auth_method: AuthMethod = AuthMethod.USER_PASS
    username: Optional[str] = None
    password: Optional[str] = None
    trusted_ca: Optional[str] = None
    startup_timeout_s: float = 30.0


@dataclass
class _Folder:
    path: str
    node_id: NodeId
    browse_name: str
    parent: Optional[str]
    children: list = field(default_factory=list)  # (NodeId, browse_name)


class MirroredAddressSpace:
    """One device's rebuilt address space: namespaces, folders, variables."""

    def __init__(self, alias: str, table, nodes):
        self.alias = alias
        # Rebuilt table: the standard namespace is never re-registered.
        # Index 0 carries the server's own URI; all other source URIs keep
        # their index positions so variable (ns, id) pairs stay intact.
        rebuilt = []
        excluded = set()
        for i, uri in enumerate(table.uris):
            if i == 0:
                rebuilt.append(f"urn:sigma:sec:{alias}")
                if uri == STANDARD_NAMESPACE_URI:
                    excluded.add(i)
            elif uri == STANDARD_NAMESPACE_URI:
                rebuilt.append("")
                excluded.add(i)
            else:
                rebuilt.append(uri)
        self.namespaces = tuple(rebuilt)

        folder_ns = next((i for i in range(1, len(rebuilt)) if i not in excluded), 1)
        root = _Folder("Objects", NodeId(0, 85), "Objects", None)
        self.folders = {"Objects": root}
        self.variables = {}  # (ns, id) -> (descriptor, store_key)
        for desc in nodes:
            if desc.node_id.ns in excluded:
                raise StructuralError(
                    f"node ({desc.node_id.ns},{desc.node_id.id}) references the "
                    "standard namespace, which is not mirrored"
                )
            parts = desc.browse_path.split("/")
            if parts[0] != "Objects":
                raise StructuralError(f"browse path {desc.browse_path!r} lacks the Objects root")
            parent_path = "Objects"
            for i in range(1, len(parts) - 1):
                path = "/".join(parts[: i + 1])
                if path not in self.folders:
                    folder = _Folder(path, NodeId(folder_ns, f"folder:{path}"), parts[i],
                                     parent_path)
                    self.folders[path] = folder
                    self.folders[parent_path].children.append((folder.node_id, parts[i]))
                parent_path = path
            self.folders[parent_path].children.append((desc.node_id, desc.browse_name))
            key = (desc.node_id.ns, desc.node_id.id)
            if key in self.variables:
                raise StructuralError(f"duplicate node id {key} in snapshot of {alias}")
            self.variables[key] = (desc, make_store_key(alias, desc.node_id))
        self.folders_by_node = {(f.node_id.ns, f.node_id.id): f for f in self.folders.values()}


class _Session:
    def __init__(self, conn, server):
        self.conn = conn
        self.server = server
        self.authenticated = False
        self.failed_hellos = 0
        self.last_rid = 0
        self.send_lock = threading.Lock()
        self.notify_queue = collections.deque(maxlen=16)
        self.notify_event = threading.Event()
        self.dropped_notifies = 0
        self.subscribed_interval_ms = None
        self.closed = threading.Event()

    def send(self, message: dict):
        with self.send_lock:
            self.conn.sendall(snap.encode_frame(message))

    def enqueue_notify(self, message: dict):
        if len(self.notify_queue) == self.notify_queue.maxlen:
            self.dropped_notifies += 1  # drop-oldest via deque maxlen
        self.notify_queue.append(message)
        self.notify_event.set()


class SecureNodeServer(threading.Thread):
    """One secure SNAP endpoint for one device alias."""

    def __init__(self, cfg: SecServerConfig, reader: StoreReader,
                 recorder: Optional[InternalLatencyRecorder] = None):
        super().__init__(name=f"sec-{cfg.alias}", daemon=True)
        self.cfg = cfg
        self.reader = reader
        self.recorder = recorder
        self.address_space: Optional[MirroredAddressSpace] = None
        self._stop_event = threading.Event()
        self._listener: Optional[socket.socket] = None
        self._sessions = []
        self._session_lock = threading.Lock()
        self.started_serving = threading.Event()
        self.startup_error: Optional[Exception] = None
        self.port = cfg.port  # rebound after listen() when cfg.port == 0

    # -- lifecycle ---------------------------------------------------------

    def stop(self):
        self._stop_event.set()
        if self._listener is not None:
            try:
                # shutdown() wakes a thread blocked in accept(); close() alone
                # would leave it stuck until process exit.
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._session_lock:
            for session in self._sessions:
                try:
                    session.conn.close()
                except OSError:
                    pass
        self.join(timeout=5)

    def run(self):
        try:
            snapshot = self._wait_for_structure()
            self.address_space = MirroredAddressSpace(self.cfg.alias, *snapshot)
            ctx = self._make_ssl_context()
        except Exception as exc:
            self.startup_error = exc
            log.error("secure server %s failed to start: %s", self.cfg.alias, exc)
            return
        # The port is bound only once the structure is available, so no
        # connection can be accepted before the address space exists.
        try:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind(("127.0.0.1", self.cfg.port))
            listener.listen(16)
        except OSError as exc:
            self.startup_error = exc
            log.error("secure server %s cannot bind port %d: %s", self.cfg.alias,
                      self.cfg.port, exc)
            return
        self._listener = listener
        self.port = listener.getsockname()[1]
        publisher = threading.Thread(target=self._publish_loop, daemon=True,
                                     name=f"pub-{self.cfg.alias}")
        publisher.start()
        self.started_serving.set()
        while not self._stop_event.is_set():
            try:
                conn, _ = listener.accept()
            except OSError:
                break
            threading.Thread(target=self._handle_conn, args=(conn, ctx), daemon=True).start()

    def _wait_for_structure(self):
        deadline = time.monotonic() + self.cfg.startup_timeout_s
        while not self._stop_event.is_set():
            snapshot = self.reader.snapshot_structure(self.cfg.alias)
            if snapshot is not None:
                return snapshot
            if time.monotonic() >= deadline:
                raise TimeoutError(
                    f"no structure for alias {self.cfg.alias!r} within "
                    f"{self.cfg.startup_timeout_s}s"
                )
            time.sleep(0.01)
        raise RuntimeError("server stopped before structure became available")

    def _make_ssl_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_3
        ctx.load_cert_chain(self.cfg.tls_cert, self.cfg.tls_key)
        if self.cfg.auth_method is AuthMethod.CLIENT_CERT:
            if not self.cfg.trusted_ca:
                raise ValueError("clientcert auth requires a trusted CA path")
            ctx.verify_mode = ssl.CERT_REQUIRED
            ctx.load_verify_locations(self.cfg.trusted_ca)
        return ctx

    # -- connection handling ----------------------------------------------

    def _handle_conn(self, raw_conn: socket.socket, ctx: ssl.SSLContext):
        try:
            raw_conn.settimeout(5.0)
            conn = ctx.wrap_socket(raw_conn, server_side=True)
            conn.settimeout(None)
        except (ssl.SSLError, OSError):
            # Plaintext or failed-handshake connections never reach the SNAP layer.
            try:
                raw_conn.close()
            except OSError:
                pass
            return
        session = _Session(conn, self)
        # A validated client certificate authenticates the session outright.
        if self.cfg.auth_method is AuthMethod.CLIENT_CERT and conn.getpeercert():
            session.authenticated = True
        with self._session_lock:
            self._sessions.append(session)
        sender = threading.Thread(target=self._notify_sender, args=(session,), daemon=True)
        sender.start()
        decoder = snap.FrameDecoder()
        try:
            while not self._stop_event.is_set():
                data = conn.recv(65536)
                if not data:
                    return
                try:
                    frames = decoder.feed(data)
                except snap.SnapProtocolViolation:
                    return
                except snap.SnapMalformed:
                    session.send(snap.err_response(0, snap.BAD_MALFORMED))
                    continue
                for frame in frames:
                    if not self._dispatch(session, frame):
                        return
        except (OSError, ssl.SSLError):
            return
        finally:
            session.closed.set()
            session.notify_event.set()
            with self._session_lock:
                if session in self._sessions:
                    self._sessions.remove(session)
            try:
                conn.close()
            except OSError:
                pass

    def _dispatch(self, session: _Session, frame: dict) -> bool:
        """Handle one request; returns False when the connection must close."""
        rid = frame.get("rid")
        op = frame.get("op")
        if not isinstance(rid, int) or rid <= session.last_rid:
            session.send(snap.err_response(rid if isinstance(rid, int) else 0,
                                           snap.BAD_MALFORMED))
            return True
        session.last_rid = rid
        if op == "hello":
            return self._handle_hello(session, frame)
        if not session.authenticated:
            session.send(snap.err_response(rid, snap.BAD_AUTH))
            return True
        if op == "read":
            session.send(self._handle_read(rid, frame))
            return True
        if op == "attrs":
            session.send(self._handle_attrs(rid, frame))
            return True
        if op == "browse":
            session.send(self._handle_browse(rid, frame))
            return True
        if op == "subscribe":
            interval = frame.get("interval_ms")
            if not isinstance(interval, int) or interval < 1:
                session.send(snap.err_response(rid, snap.BAD_MALFORMED))
                return True
            session.subscribed_interval_ms = interval
            session.send(snap.ok_response(rid, {"interval_ms": interval}))
            return True
        # Unknown ops (including any write attempt) are rejected; the surface
        # is read-only.
        session.send(snap.err_response(rid, snap.BAD_MALFORMED))
        return True

    def _handle_hello(self, session: _Session, frame: dict) -> bool:
        rid = frame["rid"]
        if session.authenticated:
            session.send(snap.ok_response(rid, {}))
            return True
        if self.cfg.auth_method is AuthMethod.USER_PASS:
            if (frame.get("user") == self.cfg.username
                    and frame.get("pass") == self.cfg.password):
                session.authenticated = True
                session.send(snap.ok_response(rid, {}))
                return True
        session.failed_hellos += 1
        session.send(snap.err_response(rid, snap.BAD_AUTH))
        return session.failed_hellos < 3

    def _node_from(self, frame: dict):
        try:
            return int(frame["ns"]), frame["id"]
        except (KeyError, TypeError, ValueError):
            return None

    def _handle_read(self, rid: int, frame: dict) -> dict:
        t_req = time.perf_counter_ns()
        node = self._node_from(frame)
        if node is None:
            return snap.err_response(rid, snap.BAD_MALFORMED)
        if node == (0, 2255):
            return snap.ok_response(rid, {"type": "StringArray",
                                          "value": list(self.address_space.namespaces)})
        entry = self.address_space.variables.get(node)
        if entry is None:
            return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)
        desc, key = entry
        value = self.reader.get_value(key)
        if value is None:
            return snap.err_response(rid, snap.BAD_NOT_READY)
        response = snap.ok_response(rid, {
            "type": value.variant.kind.value,
            "value": variant_to_wire(value.variant),
            "ts": value.source_timestamp,
        })
        if self.recorder is not None:
            self.recorder.note_read(key, time.perf_counter_ns() - t_req)
        return response

    def _handle_attrs(self, rid: int, frame: dict) -> dict:
        node = self._node_from(frame)
        if node is None:
            return snap.err_response(rid, snap.BAD_MALFORMED)
        entry = self.address_space.variables.get(node)
        if entry is not None:
            desc, _ = entry
            return snap.ok_response(rid, {
                "displayName": desc.display_name,
                "description": desc.description,
                "dataType": desc.data_type.value,
                "browseName": desc.browse_name,
            })
        folder = self.address_space.folders_by_node.get(node)
        if folder is not None:
            return snap.ok_response(rid, {
                "displayName": folder.browse_name,
                "description": "",
                "dataType": None,
                "browseName": folder.browse_name,
            })
        return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)

    def _handle_browse(self, rid: int, frame: dict) -> dict:
        node = self._node_from(frame)
        if node is None:
            return snap.err_response(rid, snap.BAD_MALFORMED)

        def ref(node_id: NodeId, name: str) -> dict:
            return {"ns": node_id.ns, "id": node_id.id, "browseName": name}

        folder = self.address_space.folders_by_node.get(node)
        if folder is not None:
            if folder.parent is None:
                parent = None
            else:
                pf = self.address_space.folders[folder.parent]
                parent = ref(pf.node_id, pf.browse_name)
            return snap.ok_response(rid, {
                "parent": parent,
                "children": [ref(nid, name) for nid, name in folder.children],
            })
        entry = self.address_space.variables.get(node)
        if entry is not None:
            desc, _ = entry
            parent_path = desc.browse_path.rsplit("/", 1)[0]
            pf = self.address_space.folders[parent_path]
            return snap.ok_response(rid, {"parent": ref(pf.node_id, pf.browse_name),
                                          "children": []})
        return snap.err_response(rid, snap.BAD_NODE_UNKNOWN)

    # -- publishing --------------------------------------------------------

    def _publish_loop(self):
        interval = self.cfg.publish_interval_ms / 1000.0
        while not self._stop_event.is_set():
            self._stop_event.wait(interval)
            if self._stop_event.is_set():
                return
            with self._session_lock:
                sessions = list(self._sessions)
            targets = [
                s for s in sessions
                if s.authenticated and (
                    self.cfg.mode is ServerMode.PUB_SUB or s.subscribed_interval_ms
                )
            ]
            if not targets:
                continue
            message = self._build_notify()
            if message is None:
                continue
            for session in targets:
                session.enqueue_notify(message)

    def _build_notify(self):
        items = []
        for (ns, ident), (desc, key) in self.address_space.variables.items():
            value = self.reader.get_value(key)
            if value is None:
                continue
            items.append({
                "key": key,
                "type": value.variant.kind.value,
                "value": variant_to_wire(value.variant),
                "ts": value.source_timestamp,
            })
        if not items:
            return None
        return {"notify": items}

    def _notify_sender(self, session: _Session):
        while not session.closed.is_set() and not self._stop_event.is_set():
            session.notify_event.wait(timeout=0.5)
            session.notify_event.clear()
            while session.notify_queue:
                try:
                    message = session.notify_queue.popleft()
                except IndexError:
                    break
                try:
                    session.send(message)
                except (OSError, ssl.SSLError):
                    return
