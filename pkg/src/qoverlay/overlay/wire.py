"""Overlay framing on the classical channel.

Data frames ride label ``overlay-data``; all integers are little-endian::

    u8   frame_type     1 = DATA, 2 = ACK
    u8   kind           CircuitKind code
    u8   flags          bit 0 = FIN (bytestream end)
    u64  circuit_id
    u64  sequence_id
    u32  key_epoch
    u32  key_offset     one_time_pad: pad offset within the sender's epoch region
    u32  length         ciphertext length (0 for ACK)
    ...  ciphertext
    16B  auth_tag       HMAC-SHA256 over every preceding byte, truncated

Control records ride label ``overlay-ctl``::

    u8   ctl_type
    u8   flags          bit 0 = reply
    u64  circuit_id
    u32  request_id
    ...  body (see CtlType)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..errors import InvalidInput
from .crypto import TAG_BYTES

DATA_LABEL = "overlay-data"
CTL_LABEL = "overlay-ctl"

_DATA_HEADER = struct.Struct("<BBBQQIII")
_CTL_HEADER = struct.Struct("<BBQI")
HEADER_BYTES = _DATA_HEADER.size

FLAG_FIN = 1


class FrameType(enum.IntEnum):
    DATA = 1
    ACK = 2


class CtlType(enum.IntEnum):
    """Control record types and their bodies.

    OPEN            u32 n + n bytes UTF-8 JSON of the circuit configuration
    FAIL            u32 n + n bytes UTF-8 reason (key material could not be provided)
    EPOCH_INSTALL   u32 epoch, u64 pool_offset, u32 length
    REFRESH_REQ     u32 wanted_epoch
    ECHO            u64 call_index, u64 stream_offset
    CLOSE           empty
    Replies carry an empty body.
    """

    OPEN = 1
    FAIL = 2
    EPOCH_INSTALL = 3
    REFRESH_REQ = 4
    ECHO = 5
    CLOSE = 6


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    kind: int
    flags: int
    circuit_id: int
    sequence_id: int
    key_epoch: int
    key_offset: int
    body: bytes
    tag: bytes = b""

    def header(self) -> bytes:
        return _DATA_HEADER.pack(int(self.frame_type), self.kind, self.flags, self.circuit_id,
                                 self.sequence_id, self.key_epoch, self.key_offset, len(self.body))

    def encode(self) -> bytes:
        if len(self.tag) != TAG_BYTES:
            raise InvalidInput("frame tag has the wrong size")
        return self.header() + self.body + self.tag


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER_BYTES + TAG_BYTES:
        raise InvalidInput("truncated overlay frame")
    ft, kind, flags, cid, seq, epoch, off, length = _DATA_HEADER.unpack_from(data)
    if HEADER_BYTES + length + TAG_BYTES != len(data):
        raise InvalidInput("overlay frame length mismatch")
    try:
        ft = FrameType(ft)
    except ValueError:
        raise InvalidInput(f"unknown frame type {ft}") from None
    body = bytes(data[HEADER_BYTES:HEADER_BYTES + length])
    return Frame(ft, kind, flags, cid, seq, epoch, off, body, bytes(data[-TAG_BYTES:]))


@dataclass(frozen=True)
class Ctl:
    ctl_type: CtlType
    circuit_id: int
    request_id: int
    body: bytes = b""
    reply: bool = False

    def encode(self) -> bytes:
        return _CTL_HEADER.pack(int(self.ctl_type), int(self.reply), self.circuit_id,
                                self.request_id) + self.body


def decode_ctl(data: bytes) -> Ctl:
    if len(data) < _CTL_HEADER.size:
        raise InvalidInput("truncated control record")
    t, flags, cid, rid = _CTL_HEADER.unpack_from(data)
    return Ctl(CtlType(t), cid, rid, bytes(data[_CTL_HEADER.size:]), bool(flags & 1))


def pack_install(epoch: int, offset: int, length: int) -> bytes:
    return struct.pack("<IQI", epoch, offset, length)


def unpack_install(body: bytes) -> tuple[int, int, int]:
    return struct.unpack("<IQI", body)


def pack_echo(call_index: int, offset: int) -> bytes:
    return struct.pack("<QQ", call_index, offset)


def unpack_echo(body: bytes) -> tuple[int, int]:
    return struct.unpack("<QQ", body)


def pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def unpack_text(body: bytes) -> str:
    (n,) = struct.unpack_from("<I", body)
    return body[4:4 + n].decode("utf-8")
