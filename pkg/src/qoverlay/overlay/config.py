"""Circuit kinds, configuration and statistics."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, fields

from ..errors import InvalidInput
from .crypto import STREAM_SEED_BYTES, TAG_KEY_BYTES


class CircuitKind(str, enum.Enum):
    SECURE_LOSSY_DATAGRAM = "secure_lossy_datagram"
    SECURE_RELIABLE_DATAGRAM = "secure_reliable_datagram"
    SECURE_RELIABLE_BYTESTREAM = "secure_reliable_bytestream"
    SYNCHRONIZED_RANDOM = "synchronized_random"

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "CircuitKind":
        for k, c in _CODES.items():
            if c == code:
                return k
        raise InvalidInput(f"unknown circuit kind code {code}")

    @property
    def reliable(self) -> bool:
        return self in (CircuitKind.SECURE_RELIABLE_DATAGRAM, CircuitKind.SECURE_RELIABLE_BYTESTREAM)


_CODES = {
    CircuitKind.SECURE_LOSSY_DATAGRAM: 1,
    CircuitKind.SECURE_RELIABLE_DATAGRAM: 2,
    CircuitKind.SECURE_RELIABLE_BYTESTREAM: 3,
    CircuitKind.SYNCHRONIZED_RANDOM: 4,
}

LOSSY = CircuitKind.SECURE_LOSSY_DATAGRAM
RELIABLE = CircuitKind.SECURE_RELIABLE_DATAGRAM
BYTESTREAM = CircuitKind.SECURE_RELIABLE_BYTESTREAM
SYNC = CircuitKind.SYNCHRONIZED_RANDOM


class CipherMode(str, enum.Enum):
    ONE_TIME_PAD = "one_time_pad"
    KEYED_STREAM = "keyed_stream"


@dataclass(frozen=True)
class CircuitConfig:
    """Per-circuit parameters, agreed by both ends at open time.

    ``otp_region_bytes`` is the pad allotted to each direction per epoch in
    one_time_pad mode. ``sync_region_bytes`` is the pool drawdown per epoch for
    synchronized_random circuits; ``echo_period`` is the number of sync calls
    between offset echoes (0 disables echoing).
    """

    kind: CircuitKind
    key_refresh_datagrams: int | None = 1000
    key_refresh_ticks: int | None = None
    cipher_mode: CipherMode = CipherMode.KEYED_STREAM
    max_datagram_bytes: int = 1024
    retransmit_limit: int = 16
    ack_timeout_ticks: int = 8
    window: int = 64
    otp_region_bytes: int = 4096
    sync_region_bytes: int = 256
    echo_period: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kind", CircuitKind(self.kind))
        object.__setattr__(self, "cipher_mode", CipherMode(self.cipher_mode))
        for name in ("key_refresh_datagrams", "key_refresh_ticks"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise InvalidInput(f"{name} must be positive or None")
        for name in ("max_datagram_bytes", "retransmit_limit", "ack_timeout_ticks", "window",
                     "otp_region_bytes", "sync_region_bytes"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        if self.echo_period < 0:
            raise InvalidInput("echo_period must be non-negative")
        if self.kind is not SYNC and self.key_refresh_datagrams is None and self.key_refresh_ticks is None:
            raise InvalidInput("datagram circuits need at least one key refresh trigger")
        if self.cipher_mode is CipherMode.ONE_TIME_PAD and self.max_datagram_bytes > self.otp_region_bytes:
            raise InvalidInput("max_datagram_bytes exceeds the per-epoch pad region")

    def epoch_bytes(self) -> int:
        """Pool bytes drawn per epoch."""
        if self.kind is SYNC:
            return self.sync_region_bytes
        per_dir = (self.otp_region_bytes if self.cipher_mode is CipherMode.ONE_TIME_PAD
                   else STREAM_SEED_BYTES)
        return 2 * (TAG_KEY_BYTES + per_dir)

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["cipher_mode"] = self.cipher_mode.value
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CircuitConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class CircuitStats:
    """Monotone per-end counters.

    ``sent`` counts first transmissions, ``delivered`` acknowledged datagrams,
    ``surfaced`` payloads handed to the local application, ``dropped`` frames
    discarded on receipt (bad tag, unknown epoch, duplicate), ``failed``
    datagrams given up after ``retransmit_limit`` attempts.
    """

    sent: int = 0
    delivered: int = 0
    surfaced: int = 0
    dropped: int = 0
    retransmitted: int = 0
    failed: int = 0
    key_bytes_consumed: int = 0
    plaintext_bytes_sent: int = 0
    pad_bytes_used: int = 0
    epochs_installed: int = 0

    def copy(self) -> "CircuitStats":
        return CircuitStats(**asdict(self))
