"""Framing for BB84 protocol records on the ``qkd-sift`` channel.

Every record is ``u32 length || body`` and all integers are little-endian::

    body    := u8 msg_type, u8 flags, u32 session_id, u32 request_id, payload
    flags   := bit 0 set on responses
    bitvec  := u32 bit_count, ceil(bit_count / 8) bytes (numpy packbits, MSB first)

    SIFT     req: bitvec sender_bases
             rsp: bitvec detected, bitvec receiver_bases
    SAMPLE   req: u32 k, k * u32 pulse_index, bitvec sender_bits
             rsp: bitvec receiver_bits
    PARITY   req: u8 pass_index, 16 bytes shuffle_seed, bitvec sender_parities
             rsp: bitvec receiver_parities
    VERIFY   req: 16 bytes digest_key, 8 bytes sender_digest, 32 bytes pa_seed
             rsp: 8 bytes receiver_digest
    COMMIT   req: u32 byte_count
             rsp: u8 accepted
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput

_HEADER = struct.Struct("<BBII")
_LEN = struct.Struct("<I")


class MsgType(enum.IntEnum):
    SIFT = 1
    SAMPLE = 2
    PARITY = 3
    VERIFY = 4
    COMMIT = 5


@dataclass(frozen=True)
class Record:
    msg_type: MsgType
    session_id: int
    request_id: int
    payload: bytes
    response: bool = False


def encode(rec: Record) -> bytes:
    body = _HEADER.pack(int(rec.msg_type), int(rec.response), rec.session_id, rec.request_id) + rec.payload
    return _LEN.pack(len(body)) + body


def decode(frame: bytes) -> Record:
    if len(frame) < _LEN.size + _HEADER.size:
        raise InvalidInput("truncated qkd record")
    (length,) = _LEN.unpack_from(frame)
    if length != len(frame) - _LEN.size:
        raise InvalidInput("qkd record length prefix mismatch")
    msg_type, flags, session_id, request_id = _HEADER.unpack_from(frame, _LEN.size)
    return Record(MsgType(msg_type), session_id, request_id,
                  bytes(frame[_LEN.size + _HEADER.size:]), bool(flags & 1))


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u32s(self, values) -> "Writer":
        arr = np.asarray(values, dtype="<u4")
        self.u32(len(arr))
        self._parts.append(arr.tobytes())
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def bits(self, bits) -> "Writer":
        arr = np.asarray(bits, dtype=np.uint8)
        self.u32(len(arr))
        self._parts.append(np.packbits(arr).tobytes())
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._data):
            raise InvalidInput("truncated qkd payload")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u32s(self) -> np.ndarray:
        k = self.u32()
        return np.frombuffer(self._take(4 * k), dtype="<u4").astype(np.int64)

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def bits(self) -> np.ndarray:
        n = self.u32()
        packed = np.frombuffer(self._take(-(-n // 8)), dtype=np.uint8)
        return np.unpackbits(packed)[:n]
