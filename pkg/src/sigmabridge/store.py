"""Central thread-safe buffer between insecure clients and secure servers.

Two synchronized maps: one for the static node structure, one for current
values. Writer and reader handles partition the API so that, by construction,
polling workers can only write and secure servers can only read.

Structures are additionally mirrored to JSON files under
config/<alias>/namespace<N>.json.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Optional

from .model import (
    Kind,
    NamespaceTable,
    NodeDescriptor,
    NodeId,
    DataValue,
    StructuralError,
    make_store_key,
    validate_alias,
    STANDARD_NAMESPACE_URI,
)

log = logging.getLogger(__name__)


class MirrorFormatError(ValueError):
    """A mirror file could not be parsed."""

    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


def _descriptor_to_json(d: NodeDescriptor) -> dict:
    # Fixed key order; part of the mirror file contract.
    return {
        "ns": d.node_id.ns,
        "id": d.node_id.id,
        "browseName": d.browse_name,
        "browsePath": d.browse_path,
        "displayName": d.display_name,
        "description": d.description,
        "dataType": d.data_type.value,
    }


def _descriptor_from_json(obj: dict) -> NodeDescriptor:
    return NodeDescriptor(
        node_id=NodeId(obj["ns"], obj["id"]),
        display_name=obj["displayName"],
        description=obj["description"],
        data_type=Kind.from_name(obj["dataType"]),
        browse_name=obj["browseName"],
        browse_path=obj["browsePath"],
    )


class DataStore:
    """Thread-safe structure + value maps with JSON mirror files."""

    def __init__(self, config_dir: Optional[Path] = None):
        self._lock = threading.Lock()
        self._values: dict = {}
        self._structure: dict = {}  # alias -> (NamespaceTable, tuple[NodeDescriptor])
        self._config_dir = Path(config_dir) if config_dir is not None else None

    def writer(self) -> "StoreWriter":
        return StoreWriter(self)

    def reader(self) -> "StoreReader":
        return StoreReader(self)

    # -- value map ---------------------------------------------------------

    def _put_value(self, key: str, value: DataValue) -> None:
        with self._lock:
            self._values[key] = value

    def _get_value(self, key: str):
        with self._lock:
            return self._values.get(key)

    # -- structure map -----------------------------------------------------

    def _put_structure(self, alias: str, table: NamespaceTable, nodes) -> None:
        validate_alias(alias)
        nodes = tuple(nodes)
        seen = set()
        for d in nodes:
            prefix = f"Objects/{alias}"
            if not (d.browse_path == prefix or d.browse_path.startswith(prefix + "/")):
                raise StructuralError(
                    f"browse path {d.browse_path!r} is not prefixed with the alias {alias!r}"
                )
            key = make_store_key(alias, d.node_id)
            if key in seen:
                raise StructuralError(f"duplicate store key {key!r} within device {alias!r}")
            seen.add(key)
        with self._lock:
            self._structure[alias] = (table, nodes)
        self._mirror_write(alias)

    def _snapshot_structure(self, alias: str):
        """Point-in-time copy of (table, nodes) or None when not yet registered."""
        with self._lock:
            entry = self._structure.get(alias)
        return entry  # tuples are immutable, safe to hand out

    def _keys_for_alias(self, alias: str):
        entry = self._snapshot_structure(alias)
        if entry is None:
            return ()
        _, nodes = entry
        return tuple(make_store_key(alias, d.node_id) for d in nodes)

    # -- mirror files ------------------------------------------------------

    def _mirror_write(self, alias: str) -> None:
        if self._config_dir is None:
            return
        entry = self._snapshot_structure(alias)
        if entry is None:
            return
        table, nodes = entry
        device_dir = self._config_dir / alias
        try:
            device_dir.mkdir(parents=True, exist_ok=True)
            by_ns: dict = {}
            for d in nodes:
                by_ns.setdefault(d.node_id.ns, []).append(d)
            for ns_index, ns_nodes in sorted(by_ns.items()):
                uri = table[ns_index] if ns_index < len(table) else ""
                doc = {
                    "namespaceUri": uri,
                    "nodes": [_descriptor_to_json(d) for d in ns_nodes],
                }
                path = device_dir / f"namespace{ns_index}.json"
                path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            # The in-memory store stays authoritative.
            log.warning("mirror write for %s failed: %s", alias, exc)

    def mirror_load(self, alias: str):
        """Rebuild (NamespaceTable, nodes) from the mirror files of one alias."""
        if self._config_dir is None:
            raise FileNotFoundError("store has no config directory")
        device_dir = self._config_dir / alias
        files = sorted(
            device_dir.glob("namespace*.json"),
            key=lambda p: int(p.stem[len("namespace"):]),
        )
        if not files:
            raise FileNotFoundError(f"no mirror files under {device_dir}")
        uris: dict = {}
        nodes = []
        for path in files:
            ns_index = int(path.stem[len("namespace"):])
            text = path.read_text(encoding="utf-8")
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise MirrorFormatError(path, exc.pos, exc.msg) from exc
            if not isinstance(doc, dict) or "namespaceUri" not in doc or "nodes" not in doc:
                raise MirrorFormatError(path, 0, "missing namespaceUri/nodes")
            uris[ns_index] = doc["namespaceUri"]
            try:
                for obj in doc["nodes"]:
                    nodes.append(_descriptor_from_json(obj))
            except (KeyError, TypeError) as exc:
                raise MirrorFormatError(path, 0, f"malformed node entry: {exc}") from exc
        size = max(uris) + 1
        table = [STANDARD_NAMESPACE_URI if i == 0 else "" for i in range(size)]
        for idx, uri in uris.items():
            table[idx] = uri
        return NamespaceTable(tuple(table)), tuple(nodes)


class StoreWriter:
    """Write-side handle held by insecure polling workers."""

    def __init__(self, store: DataStore):
        self._store = store

    def put_value(self, key: str, value: DataValue) -> None:
        self._store._put_value(key, value)

    def put_structure(self, alias: str, table: NamespaceTable, nodes) -> None:
        self._store._put_structure(alias, table, nodes)


class StoreReader:
    """Read-side handle held by secure servers; exposes no write operation."""

    def __init__(self, store: DataStore):
        self._store = store

    def get_value(self, key: str):
        return self._store._get_value(key)

    def snapshot_structure(self, alias: str):
        return self._store._snapshot_structure(alias)

    def keys_for_alias(self, alias: str):
        return self._store._keys_for_alias(alias)
