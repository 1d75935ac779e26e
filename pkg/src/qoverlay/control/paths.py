"""Trusted-relay paths: per-hop circuits stitched together at interior nodes.

Each interior relay decrypts what arrives on one hop, records the plaintext in
its relay log and re-sends it on the next hop under that hop's keys.
Datagram kinds keep their own kind on every hop. A bytestream is forwarded
segment by segment, FIN included.

Synchronized randomness over ``n > 1`` hops: hop 1 is a synchronized_random
circuit between the head and the first relay; later hops are bytestreams. The
tail asks for bytes by writing ``u32-le`` demand counts upstream; the first
relay draws that many bytes from hop 1, which consumes exactly the bytes the
head consumes for the same calls, and streams them downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Any

from ..errors import DeliveryFailed, InvalidInput, KeyExhausted
from ..overlay import BYTESTREAM, RELIABLE, SYNC, CircuitConfig, CircuitEnd, Confirmation
from ..overlay import wire

_DEMAND = struct.Struct("<I")


@dataclass(frozen=True)
class RelayRecord:
    tick: int
    relay: str
    source: str
    destination: str
    plaintext: bytes


class Relay:
    """Forwarding between two hop circuits at one interior node."""

    def __init__(self, path: "Path", node: str, upstream: CircuitEnd, downstream: CircuitEnd,
                 sync_source: bool = False):
        self.path = path
        self.node = node
        self.up = upstream
        self.down = downstream
        self.log: list[RelayRecord] = []
        self._demand = 0
        self._demand_buf = bytearray()
        if sync_source:
            upstream.listeners.append(lambda _e: self._serve_demand())
            downstream.on_surface = self._on_demand
        else:
            upstream.on_surface = lambda data, fin: self._forward(upstream, downstream, data, fin)
            downstream.on_surface = lambda data, fin: self._forward(downstream, upstream, data, fin)

    def _record(self, src: CircuitEnd, dst: CircuitEnd, data: bytes) -> None:
        self.log.append(RelayRecord(src.runtime.now, self.node, src.peer, dst.peer, data))

    def _forward(self, src: CircuitEnd, dst: CircuitEnd, data: bytes, fin: bool) -> None:
        if data or not fin:
            self._record(src, dst, data)
        try:
            if data or not fin:
                dst.submit(data)
            if fin:
                dst.submit(b"", flags=wire.FLAG_FIN)
                dst.fin_queued = True
        except Exception as exc:
            self.path.failures.append(exc)

    # synchronized randomness -------------------------------------------------
    def _on_demand(self, data: bytes, fin: bool) -> None:
        self._demand_buf += data
        while len(self._demand_buf) >= _DEMAND.size:
            (n,) = _DEMAND.unpack_from(self._demand_buf)
            del self._demand_buf[:_DEMAND.size]
            self._demand += n
        self._serve_demand()

    def _serve_demand(self) -> None:
        while self._demand:
            try:
                raw = self.up.try_draw_bytes(self._demand)
            except Exception as exc:
                self.path.failures.append(exc)
                self._demand = 0
                return
            if raw is None:
                return
            self._demand = 0
            self._record(self.up, self.down, raw)
            m = self.down.config.max_datagram_bytes
            for i in range(0, len(raw), m):
                self.down.submit(raw[i:i + m])


class PathEnd:
    """Circuit handle at a path endpoint, with the direct-circuit interface.

    Calls not overridden here go to the local hop circuit. Waiting calls
    (``drain``, ``send_reliable``) cover every hop of the path, and a failure
    on any hop is raised here.
    """

    def __init__(self, path: "Path", end: CircuitEnd, head: bool):
        self.path = path
        self.end = end
        self.head = head
        self.kind = path.config.kind
        self._sync_buf = bytearray()
        self._demanded = 0
        self.call_index = 0

    def __getattr__(self, name: str) -> Any:
        return getattr(self.end, name)

    def __repr__(self) -> str:
        return f"PathEnd({self.path.path_id}, {'head' if self.head else 'tail'}, {self.end!r})"

    @property
    def runtime(self):
        return self.end.runtime

    def _raise_failures(self) -> None:
        for hop in self.path.ends:
            if hop.broken is not None:
                raise hop.broken
        if self.path.failures:
            raise self.path.failures[0]

    def _failed_since(self, baseline: int) -> bool:
        return self.path.failed_count() > baseline

    def send_reliable(self, payload: bytes, wait: bool = True):
        if self.kind is not RELIABLE:
            raise InvalidInput("send_reliable needs a secure_reliable_datagram path")
        baseline = self.path.failed_count()
        item = self.end.submit(payload)
        if not wait:
            return item
        self.runtime.run_until(lambda: (item.settled and self.path.idle()) or self._failed_since(baseline),
                               what="end-to-end acknowledgement")
        if item.error is not None:
            raise item.error
        if self._failed_since(baseline):
            raise DeliveryFailed(f"a relay on path {self.path.path_id} gave up forwarding")
        return Confirmation(item.sequence_id, item.epoch, item.attempts)

    def drain(self, max_ticks: int | None = None) -> None:
        baseline = self.path.failed_count()
        self.runtime.run_until(lambda: self.path.idle() or self._failed_since(baseline)
                               or any(h.broken is not None for h in self.path.ends),
                               max_ticks=max_ticks, what="path drain")
        self._raise_failures()
        if self._failed_since(baseline):
            raise DeliveryFailed(f"a relay on path {self.path.path_id} gave up forwarding")

    def refresh_key(self) -> int:
        for hop in self.path.ends[::2]:
            hop.refresh_key()
        return self.end.epoch

    def sync_random(self, n_bits: int) -> int:
        if self.kind is not SYNC:
            raise InvalidInput("sync_random needs a synchronized_random path")
        if self.head or len(self.path.hops) == 1:
            return self.end.sync_random(n_bits)
        if n_bits < 1:
            raise InvalidInput("n_bits must be positive")
        value, remaining = 0, n_bits
        while remaining:
            b = min(64, remaining)
            nbytes = -(-b // 8)
            raw = self._take(nbytes)
            value = (value << b) | (int.from_bytes(raw, "big") >> (8 * nbytes - b))
            remaining -= b
        self.call_index += 1
        return value

    def _take(self, n: int) -> bytes:
        end = self.end
        short = n - len(self._sync_buf) - self._demanded
        if short > 0:
            end.submit(_DEMAND.pack(short))
            self._demanded += short

        def ready() -> bool:
            got = bytes(end.read_buffer)
            end.read_buffer.clear()
            self._sync_buf += got
            self._demanded -= len(got)
            return len(self._sync_buf) >= n or bool(self.path.failures) or end.broken is not None

        self.runtime.run_until(ready, what="relayed synchronized bytes")
        if len(self._sync_buf) < n:
            self._raise_failures()
            raise KeyExhausted("relayed synchronized bytes unavailable")
        out = bytes(self._sync_buf[:n])
        del self._sync_buf[:n]
        return out


@dataclass
class Path:
    path_id: str
    nodes: list[str]
    config: CircuitConfig
    hops: list[tuple[str, str]] = field(default_factory=list)
    ends: list[CircuitEnd] = field(default_factory=list)  # (opener, acceptor) per hop
    relays: dict[str, Relay] = field(default_factory=dict)
    failures: list[Exception] = field(default_factory=list)
    head: PathEnd | None = None
    tail: PathEnd | None = None

    def relay_log(self, node: str) -> list[RelayRecord]:
        relay = self.relays.get(node)
        return list(relay.log) if relay else []

    def failed_count(self) -> int:
        return sum(e.stats.failed for e in self.ends) + len(self.failures)

    def idle(self) -> bool:
        return all(e.idle for e in self.ends)

    def handles(self) -> tuple[PathEnd, PathEnd]:
        return self.head, self.tail


def hop_config(config: CircuitConfig, hop_index: int, hop_count: int) -> CircuitConfig:
    """Configuration of hop ``hop_index`` (0-based) for a path circuit."""
    if config.kind is not SYNC or hop_count == 1:
        return config
    if hop_index == 0:
        return replace(config, echo_period=0)
    return CircuitConfig(BYTESTREAM, key_refresh_datagrams=config.key_refresh_datagrams or 1000,
                         key_refresh_ticks=config.key_refresh_ticks)


def wire_path(path: Path) -> None:
    """Install relays on interior nodes and create the endpoint handles."""
    n = len(path.hops)
    for i in range(1, n):
        node = path.nodes[i]
        upstream = path.ends[2 * (i - 1) + 1]
        downstream = path.ends[2 * i]
        sync_source = path.config.kind is SYNC and i == 1
        path.relays[node] = Relay(path, node, upstream, downstream, sync_source=sync_source)
    path.head = PathEnd(path, path.ends[0], head=True)
    path.tail = PathEnd(path, path.ends[-1], head=False)

