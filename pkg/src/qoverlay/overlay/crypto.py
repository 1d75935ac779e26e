"""Keystreams and authentication tags for overlay datagrams.

keyed_stream keystream: ``SHAKE-256(seed || u64-le circuit_id || u64-le sequence_id)``
truncated to the payload length. Tags: ``HMAC-SHA256(tag_key, header || ciphertext)``
truncated to :data:`TAG_BYTES`.
"""

from __future__ import annotations

import hashlib
import hmac
import struct

TAG_BYTES = 16
TAG_KEY_BYTES = 32
STREAM_SEED_BYTES = 32


def keystream(seed: bytes, circuit_id: int, sequence_id: int, n: int) -> bytes:
    if n == 0:
        return b""
    return hashlib.shake_256(bytes(seed) + struct.pack("<QQ", circuit_id, sequence_id)).digest(n)


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("xor operands differ in length")
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(len(a), "little")


def tag(key: bytes, *parts: bytes) -> bytes:
    mac = hmac.new(key, digestmod=hashlib.sha256)
    for p in parts:
        mac.update(p)
    return mac.digest()[:TAG_BYTES]


def verify(key: bytes, expected: bytes, *parts: bytes) -> bool:
    return hmac.compare_digest(tag(key, *parts), expected)
