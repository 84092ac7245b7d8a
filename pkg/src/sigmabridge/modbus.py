"""Bit-exact Modbus/TCP codec for function code 0x03 (Read Holding Registers).

Covers the MBAP header, request/response/exception PDUs, and the
register-to-value conversion rules used by the polling workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from decimal import Decimal
from typing import Union

from .model import ConfigurationError, ConversionError, DataVariant, Kind, NodeId, normalize_raw

FC_READ_HOLDING_REGISTERS = 0x03
EXC_ILLEGAL_FUNCTION = 1
EXC_ILLEGAL_DATA_ADDRESS = 2
EXC_ILLEGAL_DATA_VALUE = 3
EXC_SERVER_FAILURE = 4

DEFAULT_MODBUS_PORT = 1502  # unprivileged stand-in for the standard 502


class ModbusError(Exception):
    pass


class ModbusEncodeError(ModbusError):
    pass


class ModbusProtocolViolation(ModbusError):
    """Frame is malformed beyond recovery (bad protocol id, length lies, ...)."""


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    protocol_id: int
    length: int
    unit_id: int


@dataclass(frozen=True)
class ReadHoldingRegsRequest:
    start_address: int
    quantity: int

    def __post_init__(self):
        if not 0 <= self.start_address <= 0xFFFF:
            raise ModbusEncodeError(f"start address {self.start_address} out of u16 range")
        if not 1 <= self.quantity <= 125:
            raise ModbusEncodeError(f"quantity {self.quantity} outside [1, 125]")


@dataclass(frozen=True)
class ReadHoldingRegsResponse:
    transaction_id: int
    unit_id: int
    registers: tuple


@dataclass(frozen=True)
class ExceptionResponse:
    transaction_id: int
    unit_id: int
    function_code: int
    exception_code: int


def encode_read_request(txn: int, unit: int, req: ReadHoldingRegsRequest) -> bytes:
    """12-byte frame: MBAP(txn, 0, 6, unit) + [0x03, addr, qty]."""
    return struct.pack(
        ">HHHBBHH",
        txn & 0xFFFF,
        0,
        6,
        unit & 0xFF,
        FC_READ_HOLDING_REGISTERS,
        req.start_address,
        req.quantity,
    )


def encode_read_response(txn: int, unit: int, registers) -> bytes:
    regs = tuple(registers)
    byte_count = 2 * len(regs)
    return (
        struct.pack(">HHHBBB", txn & 0xFFFF, 0, 3 + byte_count, unit & 0xFF,
                    FC_READ_HOLDING_REGISTERS, byte_count)
        + struct.pack(f">{len(regs)}H", *regs)
    )


def encode_exception(txn: int, unit: int, function_code: int, exception_code: int) -> bytes:
    return struct.pack(
        ">HHHBBB", txn & 0xFFFF, 0, 3, unit & 0xFF, (function_code | 0x80) & 0xFF, exception_code
    )


def try_decode_adu(buf) -> tuple:
    """Split one complete ADU off the front of `buf`.

    Returns (frame_bytes, consumed) or (None, 0) when incomplete.
    """
    if len(buf) < 7:
        return None, 0
    _, protocol_id, length = struct.unpack(">HHH", bytes(buf[:6]))
    if protocol_id != 0:
        raise ModbusProtocolViolation(f"protocol id {protocol_id} is not 0")
    if length < 2 or length > 256:
        raise ModbusProtocolViolation(f"implausible MBAP length {length}")
    total = 6 + length
    if len(buf) < total:
        return None, 0
    return bytes(buf[:total]), total


def decode_request(frame: bytes) -> tuple:
    """Decode a request ADU -> (MbapHeader, function_code, pdu_body_bytes)."""
    if len(frame) < 8:
        raise ModbusProtocolViolation("request frame shorter than MBAP + function code")
    txn, protocol_id, length, unit = struct.unpack(">HHHB", frame[:7])
    if protocol_id != 0:
        raise ModbusProtocolViolation(f"protocol id {protocol_id} is not 0")
    if length != len(frame) - 6:
        raise ModbusProtocolViolation("MBAP length does not match frame size")
    return MbapHeader(txn, protocol_id, length, unit), frame[7], frame[8:]


def decode_read_request(frame: bytes) -> tuple:
    """Decode a FC 0x03 request -> (MbapHeader, ReadHoldingRegsRequest)."""
    header, fc, body = decode_request(frame)
    if fc != FC_READ_HOLDING_REGISTERS:
        raise ModbusProtocolViolation(f"unexpected function code 0x{fc:02x}")
    if len(body) != 4:
        raise ModbusProtocolViolation("read request PDU must carry address and quantity")
    addr, qty = struct.unpack(">HH", body)
    return header, ReadHoldingRegsRequest(addr, qty)


def decode_response(frame: bytes) -> Union[ReadHoldingRegsResponse, ExceptionResponse]:
    """Decode a response ADU into a typed result; exceptions are values, not crashes."""
    if len(frame) < 9:
        raise ModbusProtocolViolation("response frame shorter than the minimal exception")
    txn, protocol_id, length, unit = struct.unpack(">HHHB", frame[:7])
    if protocol_id != 0:
        raise ModbusProtocolViolation(f"protocol id {protocol_id} is not 0")
    if length != len(frame) - 6:
        raise ModbusProtocolViolation("MBAP length does not match frame size")
    fc = frame[7]
    if fc & 0x80:
        if len(frame) != 9:
            raise ModbusProtocolViolation("exception response must be exactly 9 bytes")
        return ExceptionResponse(txn, unit, fc, frame[8])
    if fc != FC_READ_HOLDING_REGISTERS:
        raise ModbusProtocolViolation(f"unexpected function code 0x{fc:02x}")
    byte_count = frame[8]
    data = frame[9:]
    if byte_count != len(data) or byte_count % 2 != 0:
        raise ModbusProtocolViolation(
            f"byte count {byte_count} inconsistent with {len(data)} register bytes"
        )
    registers = struct.unpack(f">{byte_count // 2}H", data)
    return ReadHoldingRegsResponse(txn, unit, registers)


@dataclass(frozen=True)
class RegisterBinding:
    """Maps one holding register to a target node with scale and value type."""

    address: int
    scale: Decimal
    target_kind: Kind
    node_id: NodeId
    browse_name: str
    signed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scale", Decimal(str(self.scale)))
        if self.scale <= 0:
            raise ConfigurationError(f"register scale must be positive, got {self.scale}")
        if self.target_kind not in (Kind.INT16, Kind.INT32, Kind.DOUBLE):
            raise ConfigurationError(
                f"register target kind must be Int16, Int32 or Double, got {self.target_kind.value}"
            )
        if not 0 <= self.address <= 0xFFFF:
            raise ConfigurationError(f"register address {self.address} out of u16 range")


def apply_binding(raw: int, binding: RegisterBinding) -> DataVariant:
    """Convert one raw register value per its binding.

    Doubles use exact decimal multiplication followed by nearest-even binary
    rounding; integer targets require an integral scaled result.
    """
    if binding.signed and raw >= 0x8000:
        raw = raw - 0x10000
    scaled = Decimal(raw) * binding.scale
    if binding.target_kind is Kind.DOUBLE:
        return normalize_raw(float(scaled), Kind.DOUBLE)
    if scaled != scaled.to_integral_value():
        raise ConversionError(scaled, binding.target_kind)
    return normalize_raw(int(scaled), binding.target_kind)
