"""Wire framing shared by both link backends.

Every frame starts with a 16-byte little-endian header::

    wr_id:u64  opcode:u16  tenant_id:u16  length:u32

followed by ``length`` payload bytes. Data-bearing frames open their payload
with the 4-byte id of the destination queue pair; SEND frames then carry the
sender's 16-byte routing descriptor and the message bytes; WRITE frames carry
a 4-byte target region id, an 8-byte region offset and the bytes to place there.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from faasfabric import errors

HEADER = struct.Struct("<QHHI")
QPN = struct.Struct("<I")
OFFSET = struct.Struct("<Q")


class FrameOp(IntEnum):
    SEND = 1
    WRITE = 3
    ACK = 16
    NAK_RNR = 17


@dataclass
class Frame:
    wr_id: int
    opcode: FrameOp
    tenant_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(self.wr_id, int(self.opcode), self.tenant_id, len(self.payload)) + self.payload


def send_payload(dst_qp: int, header: bytes, data) -> bytes:
    return QPN.pack(dst_qp) + header + bytes(data)


def write_payload(dst_qp: int, region_id: int, offset: int, data) -> bytes:
    return QPN.pack(dst_qp) + QPN.pack(region_id) + OFFSET.pack(offset) + bytes(data)


def split_send(payload: bytes) -> tuple[int, bytes, bytes]:
    if len(payload) < QPN.size + 16:
        raise errors.BadOpcode("truncated SEND payload")
    (qpn,) = QPN.unpack_from(payload)
    return qpn, payload[4:20], payload[20:]


def split_write(payload: bytes) -> tuple[int, int, int, bytes]:
    if len(payload) < 2 * QPN.size + OFFSET.size:
        raise errors.BadOpcode("truncated WRITE payload")
    (qpn,) = QPN.unpack_from(payload)
    (region_id,) = QPN.unpack_from(payload, 4)
    (offset,) = OFFSET.unpack_from(payload, 8)
    return qpn, region_id, offset, payload[16:]


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER.size:
            wr_id, op, tenant, length = HEADER.unpack_from(self._buf)
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            try:
                opcode = FrameOp(op)
            except ValueError:
                raise errors.BadOpcode(f"unknown frame opcode {op}") from None
            frames.append(Frame(wr_id, opcode, tenant, bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return frames
