"""Shared domain types: device aliases, node identity, typed values.

Everything in here is an immutable value object with no I/O, safe to copy
between threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

STANDARD_NAMESPACE_URI = "http://opcfoundation.org/UA/"

# Standard node holding the namespace URI array on every node-model device.
NAMESPACE_ARRAY_NODE = (0, 2255)

# Standard root folder of the address space.
OBJECTS_FOLDER_NODE = (0, 85)


class ConfigurationError(ValueError):
    """A configuration value violates its constraints."""


class StructuralError(ValueError):
    """Discovered or mirrored structure is inconsistent."""


class ConversionError(ValueError):
    """A raw value cannot be represented in the requested kind."""

    def __init__(self, raw, kind):
        super().__init__(f"cannot represent {raw!r} as {kind.value}")
        self.raw = raw
        self.kind = kind


class Kind(Enum):
    """Scalar value kinds carried by the bridge."""

    BOOLEAN = "Boolean"
    INT16 = "Int16"
    INT32 = "Int32"
    INT64 = "Int64"
    FLOAT = "Float"
    DOUBLE = "Double"
    STRING = "String"
    DATETIME = "DateTime"

    @classmethod
    def from_name(cls, name: str) -> "Kind":
        for k in cls:
            if k.value == name:
                return k
        raise StructuralError(f"unknown data type kind {name!r}")


_INT_RANGES = {
    Kind.INT16: (-(2**15), 2**15 - 1),
    Kind.INT32: (-(2**31), 2**31 - 1),
    Kind.INT64: (-(2**63), 2**63 - 1),
}


def validate_alias(name: str) -> str:
    """Check a device alias: non-empty, no ':' or '/'.

    The alias doubles as a filesystem directory segment and the first
    browse-path segment after Objects/, so both characters are banned.
    """
    if not isinstance(name, str) or not name:
        raise ConfigurationError("device alias must be a non-empty string")
    if ":" in name or "/" in name:
        raise ConfigurationError(
            f"device alias {name!r} must not contain ':' or '/'"
        )
    return name


@dataclass(frozen=True)
class NodeId:
    """Address of one node: namespace index plus numeric or string identifier."""

    ns: int
    id: Union[int, str]

    def __post_init__(self):
        if not isinstance(self.ns, int) or isinstance(self.ns, bool) or self.ns < 0:
            raise ConfigurationError(f"namespace index must be unsigned, got {self.ns!r}")
        if isinstance(self.id, bool):
            raise ConfigurationError("node identifier must be an unsigned int or string")
        if isinstance(self.id, int):
            if self.id < 0:
                raise ConfigurationError(f"numeric node identifier must be unsigned, got {self.id}")
        elif isinstance(self.id, str):
            # A purely numeric string would collide with the numeric
            # identifier of the same digits once rendered into a store key.
            if not self.id or self.id.isdigit():
                raise ConfigurationError(
                    f"string node identifier {self.id!r} must be non-empty and not purely numeric"
                )
        else:
            raise ConfigurationError(f"node identifier must be int or str, got {type(self.id).__name__}")


@dataclass(frozen=True)
class NamespaceTable:
    """Ordered namespace URIs; list position is the namespace index."""

    uris: tuple

    def __post_init__(self):
        object.__setattr__(self, "uris", tuple(self.uris))
        for u in self.uris:
            if not isinstance(u, str):
                raise ConfigurationError("namespace URIs must be strings")

    def __len__(self):
        return len(self.uris)

    def __getitem__(self, idx):
        return self.uris[idx]


@dataclass(frozen=True)
class DataVariant:
    """One typed scalar. DateTime payloads are nanoseconds since Unix epoch (UTC)."""

    kind: Kind
    value: object

    def __post_init__(self):
        k, v = self.kind, self.value
        if k is Kind.BOOLEAN:
            if not isinstance(v, bool):
                raise ConversionError(v, k)
        elif k in _INT_RANGES:
            lo, hi = _INT_RANGES[k]
            if isinstance(v, bool) or not isinstance(v, int) or not lo <= v <= hi:
                raise ConversionError(v, k)
        elif k is Kind.FLOAT:
            if not isinstance(v, float):
                raise ConversionError(v, k)
        elif k is Kind.DOUBLE:
            if not isinstance(v, float):
                raise ConversionError(v, k)
        elif k is Kind.STRING:
            if not isinstance(v, str):
                raise ConversionError(v, k)
        elif k is Kind.DATETIME:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConversionError(v, k)
        else:  # pragma: no cover - enum is closed
            raise ConversionError(v, k)


@dataclass(frozen=True)
class DataValue:
    """A variant plus the source timestamp (epoch nanoseconds, UTC)."""

    variant: DataVariant
    source_timestamp: int

    def __post_init__(self):
        if not isinstance(self.source_timestamp, int) or self.source_timestamp <= 0:
            raise ConfigurationError("sourceTimestamp must be a positive epoch-nanosecond integer")


@dataclass(frozen=True)
class NodeDescriptor:
    """Mirrored static attributes of one variable node."""

    node_id: NodeId
    display_name: str
    description: str
    data_type: Kind
    browse_name: str
    browse_path: str

    def __post_init__(self):
        if not self.browse_path.startswith("Objects/"):
            raise StructuralError(f"browse path {self.browse_path!r} must begin with 'Objects/'")


def make_store_key(alias: str, node: NodeId) -> str:
    """Render the deterministic key "<Alias>:<NamespaceIndex>:<NodeId>"."""
    validate_alias(alias)
    return f"{alias}:{node.ns}:{node.id}"


def parse_store_key(key: str) -> tuple:
    """Split a store key back into (alias, NodeId); inverse of make_store_key."""
    alias, sep1, rest = key.partition(":")
    ns_str, sep2, ident = rest.partition(":")
    if not sep1 or not sep2 or not ns_str.isdigit():
        raise ConfigurationError(f"malformed store key {key!r}")
    validate_alias(alias)
    ident_val: Union[int, str] = int(ident) if ident.isdigit() else ident
    return alias, NodeId(int(ns_str), ident_val)


def assemble_browse_path(alias: str, segments) -> str:
    """Join "Objects/<alias>" with the browse-name segments from root to node."""
    validate_alias(alias)
    for seg in segments:
        if "/" in seg:
            raise StructuralError(f"browse-name segment {seg!r} contains '/'")
    if not segments:
        return f"Objects/{alias}"
    return "Objects/" + alias + "/" + "/".join(segments)


def _round_float32(value: float) -> float:
    """IEEE-754 nearest rounding of a double to single precision."""
    return struct.unpack(">f", struct.pack(">f", value))[0]


def normalize_raw(raw, kind: Kind) -> DataVariant:
    """Convert a protocol-level scalar into a typed variant.

    Integers convert losslessly or raise; floats round to the nearest IEEE
    representation of the target width; nothing is silently truncated.
    """
    if kind is Kind.BOOLEAN:
        if isinstance(raw, bool):
            return DataVariant(kind, raw)
        if isinstance(raw, int):
            return DataVariant(kind, raw != 0)
        raise ConversionError(raw, kind)
    if kind in _INT_RANGES:
        if isinstance(raw, bool) or not isinstance(raw, int):
            if isinstance(raw, float) and raw.is_integer():
                raw = int(raw)
            else:
                raise ConversionError(raw, kind)
        lo, hi = _INT_RANGES[kind]
        if not lo <= raw <= hi:
            raise ConversionError(raw, kind)
        return DataVariant(kind, raw)
    if kind is Kind.FLOAT:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConversionError(raw, kind)
        return DataVariant(kind, _round_float32(float(raw)))
    if kind is Kind.DOUBLE:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConversionError(raw, kind)
        return DataVariant(kind, float(raw))
    if kind is Kind.STRING:
        if not isinstance(raw, str):
            raise ConversionError(raw, kind)
        return DataVariant(kind, raw)
    if kind is Kind.DATETIME:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConversionError(raw, kind)
        return DataVariant(kind, raw)
    raise ConversionError(raw, kind)  # pragma: no cover


def variant_to_wire(variant: DataVariant):
    """JSON-safe payload value for a variant."""
    return variant.value


def variant_from_wire(type_name: str, value) -> DataVariant:
    """Rebuild a variant from its wire representation (type name + JSON value)."""
    kind = Kind.from_name(type_name)
    if kind in (Kind.DOUBLE, Kind.FLOAT) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return DataVariant(kind, value)
