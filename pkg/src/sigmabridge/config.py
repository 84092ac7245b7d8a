"""Configuration file loading and cross-validation.

Two JSON files drive the bridge: client_configuration.json (insecure
endpoints to poll) and server_configuration.json (secure endpoints to
expose). Errors name the file, the JSON path, and the reason.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from .client import InsecEndpointConfig, Protocol
from .model import ConfigurationError, Kind, NodeId
from .modbus import RegisterBinding
from .secserver import AuthMethod, SecServerConfig, ServerMode

DEFAULT_CLIENT_CONFIG = "client_configuration.json"
DEFAULT_SERVER_CONFIG = "server_configuration.json"
DEFAULT_POLL_INTERVAL_MS = 100


@dataclass
class ClientConfiguration:
    devices: List[InsecEndpointConfig]


@dataclass
class ServerConfiguration:
    servers: List[SecServerConfig]


def _fail(path, json_path, reason):
    raise ConfigurationError(f"{path}: {json_path}: {reason}")


def _node_id(obj, path, json_path) -> NodeId:
    try:
        return NodeId(obj["ns"], obj["id"])
    except (KeyError, TypeError) as exc:
        _fail(path, json_path, f"node id needs 'ns' and 'id': {exc}")
    except ConfigurationError as exc:
        _fail(path, json_path, str(exc))


def load_client_configuration(path) -> ClientConfiguration:
    path = Path(path)
    doc = _read_json(path)
    devices = []
    for i, entry in enumerate(doc.get("devices", [])):
        jp = f"devices[{i}]"
        try:
            protocol = Protocol(entry["protocol"])
        except (KeyError, ValueError):
            _fail(path, jp, f"protocol must be one of {[p.value for p in Protocol]}")
        alias = entry.get("alias")
        host = entry.get("host")
        port = entry.get("port")
        if not alias or not host or not isinstance(port, int):
            _fail(path, jp, "alias, host and port are required")
        poll = entry.get("pollIntervalMs", DEFAULT_POLL_INTERVAL_MS)
        if not isinstance(poll, int) or poll < 1:
            _fail(path, jp, "pollIntervalMs must be a positive integer")

        node_selection = None
        bindings = []
        unit_id = 1
        if protocol is Protocol.SNAP_LEGACY:
            nodes = entry.get("nodes", "all")
            if nodes != "all":
                node_selection = [_node_id(n, path, f"{jp}.nodes[{j}]")
                                  for j, n in enumerate(nodes)]
        else:
            unit_id = entry.get("unitId", 1)
            regs = entry.get("registers")
            if not regs:
                _fail(path, jp, "modbus devices need a non-empty 'registers' list")
            for j, reg in enumerate(regs):
                rjp = f"{jp}.registers[{j}]"
                try:
                    bindings.append(RegisterBinding(
                        address=reg["address"],
                        scale=reg.get("scale", 1),
                        target_kind=Kind.from_name(reg.get("type", "Int32")),
                        node_id=_node_id(reg["nodeId"], path, f"{rjp}.nodeId"),
                        browse_name=reg["browseName"],
                        signed=reg.get("signed", False),
                    ))
                except (KeyError, TypeError) as exc:
                    _fail(path, rjp, f"missing field: {exc}")
                except (ConfigurationError, ValueError) as exc:
                    _fail(path, rjp, str(exc))
        try:
            devices.append(InsecEndpointConfig(
                alias=alias, protocol=protocol, host=host, port=port,
                poll_interval_ms=poll, node_selection=node_selection,
                unit_id=unit_id, bindings=bindings,
            ))
        except (ConfigurationError, ValueError) as exc:
            _fail(path, jp, str(exc))

    aliases = [d.alias for d in devices]
    dupes = {a for a in aliases if aliases.count(a) > 1}
    if dupes:
        _fail(path, "devices", f"duplicate aliases: {sorted(dupes)}")
    return ClientConfiguration(devices=devices)


def load_server_configuration(path) -> ServerConfiguration:
    path = Path(path)
    doc = _read_json(path)
    global_mode = doc.get("mode")
    if global_mode is not None:
        try:
            global_mode = ServerMode(global_mode)
        except ValueError:
            _fail(path, "mode", f"mode must be one of {[m.value for m in ServerMode]}")
    servers = []
    for i, entry in enumerate(doc.get("servers", [])):
        jp = f"servers[{i}]"
        alias = entry.get("alias")
        port = entry.get("port")
        if not alias or not isinstance(port, int):
            _fail(path, jp, "alias and port are required")
        mode = entry.get("mode")
        if mode is not None:
            try:
                mode = ServerMode(mode)
            except ValueError:
                _fail(path, f"{jp}.mode", "unknown mode")
        else:
            mode = global_mode or ServerMode.CLIENT_SERVER
        tls = entry.get("tls") or {}
        if "cert" not in tls or "key" not in tls:
            _fail(path, f"{jp}.tls", "tls.cert and tls.key are required")
        auth = entry.get("auth") or {}
        try:
            method = AuthMethod(auth.get("method", "userpass"))
        except ValueError:
            _fail(path, f"{jp}.auth.method",
                  f"must be one of {[m.value for m in AuthMethod]}")
        username = auth.get("user")
        password = auth.get("pass")
        trusted_ca = auth.get("trustedCa")
        if method is AuthMethod.USER_PASS and (username is None or password is None):
            _fail(path, f"{jp}.auth", "userpass auth needs 'user' and 'pass'")
        if method is AuthMethod.CLIENT_CERT and trusted_ca is None:
            _fail(path, f"{jp}.auth", "clientcert auth needs 'trustedCa'")
        servers.append(SecServerConfig(
            alias=alias, port=port,
            tls_cert=tls["cert"], tls_key=tls["key"],
            mode=mode,
            publish_interval_ms=entry.get("publishIntervalMs", 100),
            auth_method=method, username=username, password=password,
            trusted_ca=trusted_ca,
            startup_timeout_s=entry.get("startupTimeoutS", 30.0),
        ))

    ports = [s.port for s in servers]
    dupes = {p for p in ports if ports.count(p) > 1}
    if dupes:
        _fail(path, "servers", f"duplicate ports: {sorted(dupes)}")
    aliases = [s.alias for s in servers]
    dupes = {a for a in aliases if aliases.count(a) > 1}
    if dupes:
        _fail(path, "servers", f"duplicate aliases: {sorted(dupes)}")
    return ServerConfiguration(servers=servers)


def load_configs(client_path, server_path):
    """Load and cross-validate both configuration files."""
    clients = load_client_configuration(client_path)
    servers = load_server_configuration(server_path)
    client_aliases = {d.alias for d in clients.devices}
    for s in servers.servers:
        if s.alias not in client_aliases:
            raise ConfigurationError(
                f"{server_path}: server alias {s.alias!r} has no client entry"
            )
    return clients, servers


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return doc
