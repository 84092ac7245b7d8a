"""sigmabridge: a TCP-level aggregating bridge for insecure legacy devices.

Polls legacy endpoints (Modbus/TCP, plaintext SNAP) into a central
thread-safe store and re-exposes each device, namespace intact, as its own
authenticated TLS endpoint on a dedicated port.
"""

from .model import (
    DataValue,
    DataVariant,
    Kind,
    NamespaceTable,
    NodeDescriptor,
    NodeId,
    assemble_browse_path,
    make_store_key,
    normalize_raw,
    parse_store_key,
)
from .store import DataStore

__all__ = [
    "DataStore",
    "DataValue",
    "DataVariant",
    "Kind",
    "NamespaceTable",
    "NodeDescriptor",
    "NodeId",
    "assemble_browse_path",
    "make_store_key",
    "normalize_raw",
    "parse_store_key",
]

__version__ = "0.1.0"
