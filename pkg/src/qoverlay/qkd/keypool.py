"""Distilled key material held at one endpoint of a link."""

from __future__ import annotations

import bisect
import hashlib
import threading
from dataclasses import dataclass, field

from ..errors import DesyncError, InvalidInput, KeyExhausted


@dataclass(frozen=True)
class LedgerEntry:
    offset: int
    length: int
    purpose: str

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class KeyPoolSnapshot:
    session_counter: int
    size: int
    consumed_offset: int
    available: int
    digest: str


class KeyPool:
    """Append-only key material with a ledger of every byte range handed out.

    The pool master allocates sequentially with :meth:`take`; the peer mirrors
    each allocation with :meth:`claim` at the offset the master announced.
    Any overlap between two ledger entries is a key-reuse bug and is refused.
    """

    def __init__(self, low_watermark: int = 256):
        if low_watermark < 0:
            raise InvalidInput("low_watermark must be non-negative")
        self.session_counter = 0
        self.material = bytearray()
        self.consumed_offset = 0
        self.low_watermark = low_watermark
        self.ledger: list[LedgerEntry] = []
        self._claimed: list[tuple[int, int]] = []  # sorted disjoint ranges
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.material)

    @property
    def available(self) -> int:
        return len(self.material) - self.consumed_offset

    @property
    def below_watermark(self) -> bool:
        return self.available < self.low_watermark

    def append(self, data: bytes) -> None:
        with self._lock:
            self.material.extend(data)
            self.session_counter += 1

    def take(self, n: int, purpose: str) -> tuple[int, bytes]:
        """Hand out the next ``n`` unused bytes."""
        with self._lock:
            if n <= 0:
                raise InvalidInput("must take at least one byte")
            if self.available < n:
                raise KeyExhausted(f"need {n} bytes, pool holds {self.available}")
            off = self.consumed_offset
            self._record(off, n, purpose)
            return off, bytes(self.material[off:off + n])

    def claim(self, offset: int, n: int, purpose: str) -> bytes:
        """Consume exactly ``[offset, offset + n)`` as announced by the peer."""
        with self._lock:
            if n <= 0 or offset < 0:
                raise InvalidInput("bad claim range")
            if offset + n > len(self.material):
                raise DesyncError(
                    f"claim [{offset}, {offset + n}) beyond local material ({len(self.material)})"
                )
            self._record(offset, n, purpose)
            return bytes(self.material[offset:offset + n])

    def _record(self, off: int, n: int, purpose: str) -> None:
        end = off + n
        i = bisect.bisect_left(self._claimed, (off, end))
        for lo, hi in self._claimed[max(0, i - 1):i + 1]:
            if off < hi and lo < end:
                raise DesyncError(f"key range [{off}, {end}) overlaps consumed [{lo}, {hi})")
        self._claimed.insert(i, (off, end))
        self.ledger.append(LedgerEntry(off, n, purpose))
        self.consumed_offset = max(self.consumed_offset, end)

    def snapshot(self) -> KeyPoolSnapshot:
        with self._lock:
            return KeyPoolSnapshot(
                self.session_counter,
                len(self.material),
                self.consumed_offset,
                self.available,
                hashlib.sha256(self.material).hexdigest(),
            )

    def consumed_bytes(self, purpose_prefix: str = "") -> int:
        return sum(e.length for e in self.ledger if e.purpose.startswith(purpose_prefix))


def audit_ledger(entries) -> None:
    """Raise ``AssertionError`` if any two ledger ranges overlap."""
    spans = sorted((e.offset, e.end, e.purpose) for e in entries)
    for (lo1, hi1, p1), (lo2, hi2, p2) in zip(spans, spans[1:]):
        if lo2 < hi1:
            raise AssertionError(f"key bytes reused: [{lo1},{hi1}) {p1} vs [{lo2},{hi2}) {p2}")
