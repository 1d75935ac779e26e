"""Circuit endpoints: epoch keys, encryption, delivery and synchronized draws.

One :class:`CircuitEnd` lives at each end of a circuit. The end at the link's
pool master allocates the key material of every epoch from its KeyPool and
announces ``(epoch, pool_offset, length)``; the other end claims the same
range. Epoch material is laid out as::

    datagram kinds:  tag_key[m->s] (32) | tag_key[s->m] (32) | cipher[m->s] | cipher[s->m]
    synchronized:    region bytes, consumed sequentially across epochs

where ``m->s`` is the master-to-slave direction and ``cipher`` is a 32-byte
keystream seed (keyed_stream) or an ``otp_region_bytes`` pad (one_time_pad).

Methods prefixed ``submit``/``try``/``on`` never block and are what relays
and host code use; the plain application calls (``send_lossy``,
``send_reliable``, ``stream_read`` ...) drive the simulation until their
contract is met.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from ..errors import (
    CircuitUnavailable,
    DeliveryFailed,
    DesyncError,
    InvalidInput,
    KeyExhausted,
)
from ..management import Event, EventKind, Severity
from . import crypto, wire
from .config import BYTESTREAM, LOSSY, RELIABLE, SYNC, CipherMode, CircuitConfig, CircuitStats
from .crypto import STREAM_SEED_BYTES, TAG_KEY_BYTES

if TYPE_CHECKING:
    from ..qkd import QkdLink
    from .runtime import Host

DEDUP_WINDOW = 1 << 16
FUTURE_BUFFER = 256


class State(str, enum.Enum):
    OPENING = "opening"
    OPEN = "open"
    FAILED = "failed"
    CLOSED = "closed"


@dataclass
class EpochKeys:
    epoch: int
    pool_offset: int
    length: int
    tag_keys: tuple[bytes, bytes] = (b"", b"")
    seeds: tuple[bytes, bytes] = (b"", b"")
    pads: tuple[bytes, bytes] = (b"", b"")
    region: bytes = b""
    pad_used: list[int] = field(default_factory=lambda: [0, 0])
    superseded_at: int | None = None

    @classmethod
    def from_material(cls, epoch: int, offset: int, material: bytes, config: CircuitConfig) -> "EpochKeys":
        keys = cls(epoch, offset, len(material))
        if config.kind is SYNC:
            keys.region = material
            return keys
        t = TAG_KEY_BYTES
        keys.tag_keys = (material[:t], material[t:2 * t])
        rest = material[2 * t:]
        half = len(rest) // 2
        if config.cipher_mode is CipherMode.ONE_TIME_PAD:
            keys.pads = (rest[:half], rest[half:])
        else:
            keys.seeds = (rest[:STREAM_SEED_BYTES], rest[half:half + STREAM_SEED_BYTES])
        return keys

    def pad_remaining(self, direction: int) -> int:
        return len(self.pads[direction]) - self.pad_used[direction]


@dataclass
class Outgoing:
    """A unit of data queued at the sender; doubles as the confirmation object."""

    payload: bytes
    reliable: bool
    flags: int = 0
    sequence_id: int | None = None
    epoch: int | None = None
    frame: bytes = b""
    attempts: int = 0
    deadline: int = 0
    done: bool = False
    error: Exception | None = None

    @property
    def settled(self) -> bool:
        return self.done or self.error is not None

    @property
    def transmitted(self) -> bool:
        return self.sequence_id is not None or self.error is not None


@dataclass(frozen=True)
class SendReceipt:
    sequence_id: int
    key_epoch: int
    size: int


@dataclass(frozen=True)
class Confirmation:
    sequence_id: int
    key_epoch: int
    attempts: int


class _Dedup:
    """Sliding window of sequence ids already surfaced."""

    def __init__(self, width: int = DEDUP_WINDOW):
        self.width = width
        self.top = -1
        self.seen: set[int] = set()

    def first_time(self, seq: int) -> bool:
        if seq <= self.top - self.width or seq in self.seen:
            return False
        self.seen.add(seq)
        if seq > self.top:
            self.top = seq
            if len(self.seen) > 2 * self.width:
                floor = self.top - self.width
                self.seen = {s for s in self.seen if s > floor}
        return True


class CircuitEnd:
    """One end of an overlay circuit; also the application's circuit handle."""

    def __init__(self, host: "Host", circuit_id: int, config: CircuitConfig, peer: str,
                 link: "QkdLink", opener: bool):
        self.host = host
        self.runtime = host.runtime
        self.circuit_id = circuit_id
        self.config = config
        self.kind = config.kind
        self.local = host.name
        self.peer = peer
        self.link = link
        self.pool = link.pools[self.local]
        self.is_master = link.master == self.local
        self.opener = opener
        self.out_dir = 0 if self.is_master else 1
        self.in_dir = 1 - self.out_dir
        self.scope = f"link:{link.a}-{link.b}"

        self.state = State.OPENING
        self.degraded = False
        self.failure: Exception | None = None
        self.epochs: dict[int, EpochKeys] = {}
        self.epoch = -1
        self.epoch_started = 0
        self.sent_in_epoch = 0
        self._allocated = -1
        self._alloc_pending = False
        self._requested = 0
        self.stats = CircuitStats()
        self.key_failures = 0
        self.peer_closed = False
        self.listeners: list[Callable[["CircuitEnd"], None]] = []

        # datagram and stream state
        self.next_seq = 0
        self.sendq: deque[Outgoing] = deque()
        self.outstanding: dict[int, Outgoing] = {}
        self.inbox: deque[bytes] = deque()
        self.on_surface: Callable[[bytes, bool], None] | None = None
        self._dedup = _Dedup()
        self._future: list[wire.Frame] = []
        self.rx_next = 0
        self._rx_pending: dict[int, tuple[bytes, bool]] = {}
        self.read_buffer = bytearray()
        self.eof = False
        self.fin_queued = False
        self.broken: Exception | None = None

        # synchronized random state
        self.cursor_epoch = 0
        self.cursor_pos = 0
        self.stream_offset = 0
        self.call_index = 0
        self.desync = False
        self._echo_marks: dict[int, int] = {}
        self._peer_echo: dict[int, int] = {}

    def __repr__(self) -> str:
        return (f"CircuitEnd(id={self.circuit_id:#x}, kind={self.kind.value}, "
                f"{self.local}->{self.peer}, epoch={self.epoch}, state={self.state.value})")

    # ------------------------------------------------------------------ keys
    @property
    def now(self) -> int:
        return self.runtime.now

    def _emit(self, kind: EventKind, severity: Severity, **attrs) -> None:
        attrs.setdefault("circuit", self.circuit_id)
        self.host.emit(Event(self.now, self.scope, kind, severity, attrs))

    def _purpose(self, epoch: int) -> str:
        return f"circuit:{self.circuit_id}:epoch:{epoch}"

    def allocate(self) -> None:
        """Master: draw the next epoch's material and announce it."""
        if not self.is_master or self._alloc_pending or self.state in (State.FAILED, State.CLOSED):
            return
        need = self.config.epoch_bytes()
        if self.runtime.is_link_down(self.link):
            self._allocation_failed("link_down")
            return
        first = self._allocated < 0
        avail = self.pool.available
        if self.kind is SYNC and avail >= 1:
            need = min(need, avail)
        if avail < need or (first and self.pool.below_watermark):
            self._alloc_pending = True
            target = need + (self.pool.low_watermark if first else 0)
            self.host.schedule_refill(self.link, target, self._on_refilled)
            return
        epoch = self._allocated + 1
        offset, material = self.pool.take(need, self._purpose(epoch))
        self._allocated = epoch
        # Keys are usable for receiving at once; sending switches over only once
        # the peer confirms, so it never sees frames of an epoch it lacks.
        self._store(epoch, offset, material)
        self.host.ctl_request(self.peer, wire.CtlType.EPOCH_INSTALL, self.circuit_id,
                              wire.pack_install(epoch, offset, need),
                              on_reply=lambda: self._activate(epoch),
                              on_fail=lambda: self._key_failure("peer_unreachable"))
        if self.pool.below_watermark and self.runtime.auto_refill:
            self.host.schedule_refill(self.link, self.pool.low_watermark, None)

    def _on_refilled(self, ok: bool, status: str) -> None:
        self._alloc_pending = False
        if ok:
            self.allocate()
        else:
            self._allocation_failed(status)

    def _allocation_failed(self, reason: str) -> None:
        self.host.ctl_request(self.peer, wire.CtlType.FAIL, self.circuit_id, wire.pack_text(reason))
        self._key_failure(reason)

    def _key_failure(self, reason: str) -> None:
        self.key_failures += 1
        if self.state is State.OPENING:
            self.state = State.FAILED
            self.failure = CircuitUnavailable(f"no key material for circuit {self.circuit_id:#x}: {reason}")
        else:
            self.degraded = True
            self._emit(EventKind.SESSION_ABORTED, Severity.CRITICAL, status=reason, reason="refresh_failed")
        # Queued one-time-pad sends cannot proceed without fresh pad.
        if self.config.cipher_mode is CipherMode.ONE_TIME_PAD or self.epoch < 0:
            err = KeyExhausted(f"key refresh failed on circuit {self.circuit_id:#x}: {reason}")
            while self.sendq:
                self.sendq.popleft().error = err
        self._notify()

    def want_refresh(self) -> None:
        if self.is_master:
            if self._allocated <= self.epoch:
                self.allocate()
        else:
            self.request_epoch(self.epoch + 1)

    def request_epoch(self, wanted: int) -> None:
        if wanted <= self._requested or self.state in (State.FAILED, State.CLOSED):
            return
        self._requested = wanted
        self.host.ctl_request(self.peer, wire.CtlType.REFRESH_REQ, self.circuit_id,
                              wanted.to_bytes(4, "little"))

    def _install(self, epoch: int, offset: int, material: bytes) -> None:
        self._store(epoch, offset, material)
        self._activate(epoch)

    def _store(self, epoch: int, offset: int, material: bytes) -> None:
        if epoch in self.epochs:
            return
        self.epochs[epoch] = EpochKeys.from_material(epoch, offset, material, self.config)
        self.stats.key_bytes_consumed += len(material)
        self.stats.epochs_installed += 1

    def _activate(self, epoch: int) -> None:
        if self.state in (State.FAILED, State.CLOSED):
            return
        if epoch > self.epoch:
            for keys in self.epochs.values():
                if keys.epoch < epoch and keys.superseded_at is None:
                    keys.superseded_at = self.now
            self.epoch = epoch
            self.epoch_started = self.now
            self.sent_in_epoch = 0
            if epoch > 0 and self.is_master:
                self._emit(EventKind.EPOCH_ROLLED, Severity.INFO, epoch=epoch)
        if self.state is State.OPENING:
            self.state = State.OPEN
        self._prune()
        if self._future:
            pending, self._future = self._future, []
            for fr in pending:
                self.on_frame(fr)
        self.pump()
        self._notify()

    def _prune(self) -> None:
        if self.kind is SYNC:
            return
        latency = self.runtime.network.channel_params(self.local, self.peer).latency_ticks
        hold = self.config.retransmit_limit * self.config.ack_timeout_ticks + 2 * latency + 2
        for e in [e for e, k in self.epochs.items()
                  if k.superseded_at is not None and self.now - k.superseded_at > hold]:
            del self.epochs[e]

    def _notify(self) -> None:
        for fn in list(self.listeners):
            fn(self)

    # --------------------------------------------------------------- control
    def on_ctl(self, ctl: wire.Ctl) -> None:
        t = ctl.ctl_type
        if t is wire.CtlType.EPOCH_INSTALL:
            epoch, offset, length = wire.unpack_install(ctl.body)
            if epoch not in self.epochs:
                material = self.pool.claim(offset, length, self._purpose(epoch))
                self._install(epoch, offset, material)
        elif t is wire.CtlType.REFRESH_REQ:
            wanted = int.from_bytes(ctl.body[:4], "little")
            if self.is_master and self._allocated < wanted:
                self.allocate()
        elif t is wire.CtlType.FAIL:
            self._key_failure(wire.unpack_text(ctl.body))
        elif t is wire.CtlType.ECHO:
            k, off = wire.unpack_echo(ctl.body)
            self._peer_echo[k] = off
            self._check_echo(k)
        elif t is wire.CtlType.CLOSE:
            self.peer_closed = True
            self._notify()

    def on_open_ack(self) -> None:
        if self.is_master:
            self.allocate()

    def on_open_lost(self) -> None:
        if self.state is State.OPENING:
            self.state = State.FAILED
            self.failure = CircuitUnavailable(f"peer {self.peer} did not answer the open request")
            self._notify()

    # -------------------------------------------------------------- sending
    def _check_sendable(self, payload: bytes, kinds) -> None:
        if self.kind not in kinds:
            raise InvalidInput(f"operation not valid on a {self.kind.value} circuit")
        if self.state is not State.OPEN:
            raise self.failure or CircuitUnavailable(f"circuit is {self.state.value}")
        if len(payload) > self.config.max_datagram_bytes:
            raise InvalidInput(f"payload of {len(payload)} bytes exceeds max_datagram_bytes "
                               f"{self.config.max_datagram_bytes}")
        if self.broken is not None:
            raise self.broken

    def submit(self, payload: bytes, flags: int = 0) -> Outgoing:
        """Queue a datagram (reliability follows the circuit kind)."""
        payload = bytes(payload)
        self._check_sendable(payload, (LOSSY, RELIABLE, BYTESTREAM))
        item = Outgoing(payload, self.kind.reliable, flags)
        self.sendq.append(item)
        self.pump()
        return item

    def pump(self) -> None:
        while self.sendq and self.state is State.OPEN and self.broken is None:
            item = self.sendq[0]
            if item.reliable and len(self.outstanding) >= self.config.window:
                return
            keys = self.epochs.get(self.epoch)
            if keys is None:
                return
            if (self.config.cipher_mode is CipherMode.ONE_TIME_PAD
                    and keys.pad_remaining(self.out_dir) < len(item.payload)):
                self.want_refresh()
                return
            self.sendq.popleft()
            self._transmit(item, keys)

    def _transmit(self, item: Outgoing, keys: EpochKeys) -> None:
        seq = self.next_seq
        self.next_seq += 1
        n = len(item.payload)
        if self.config.cipher_mode is CipherMode.ONE_TIME_PAD:
            off = keys.pad_used[self.out_dir]
            pad = keys.pads[self.out_dir][off:off + n]
            keys.pad_used[self.out_dir] += n
            self.stats.pad_bytes_used += n
        else:
            off = 0
            pad = crypto.keystream(keys.seeds[self.out_dir], self.circuit_id, seq, n)
        ct = crypto.xor_bytes(item.payload, pad)
        fr = wire.Frame(wire.FrameType.DATA, self.kind.code, item.flags, self.circuit_id, seq,
                        keys.epoch, off, ct)
        header = fr.header()
        item.frame = header + ct + crypto.tag(keys.tag_keys[self.out_dir], header, ct)
        item.sequence_id = seq
        item.epoch = keys.epoch
        item.attempts = 1
        self.host.send(self.peer, wire.DATA_LABEL, item.frame)
        self.stats.sent += 1
        self.stats.plaintext_bytes_sent += n
        if item.reliable:
            item.deadline = self.now + self.config.ack_timeout_ticks
            self.outstanding[seq] = item
        else:
            item.done = True
        self.sent_in_epoch += 1
        krd = self.config.key_refresh_datagrams
        if krd is not None and self.sent_in_epoch >= krd:
            self.want_refresh()

    def on_timer(self) -> None:
        now = self.now
        krt = self.config.key_refresh_ticks
        if (self.is_master and krt is not None and self.state is State.OPEN and self.kind is not SYNC
                and now - self.epoch_started >= krt):
            self.want_refresh()
        for seq in sorted(s for s, it in self.outstanding.items() if it.deadline <= now):
            item = self.outstanding.get(seq)
            if item is None:
                continue
            if item.attempts >= self.config.retransmit_limit:
                self._give_up(item)
                continue
            item.attempts += 1
            item.deadline = now + self.config.ack_timeout_ticks
            self.stats.retransmitted += 1
            self.host.send(self.peer, wire.DATA_LABEL, item.frame)
        self._prune()

    def next_deadline(self) -> int | None:
        cands = [it.deadline for it in self.outstanding.values()]
        krt = self.config.key_refresh_ticks
        if (self.is_master and krt is not None and self.state is State.OPEN and self.kind is not SYNC
                and self._allocated <= self.epoch and not self._alloc_pending):
            cands.append(self.epoch_started + krt)
        return min(cands) if cands else None

    def _give_up(self, item: Outgoing) -> None:
        err = DeliveryFailed(
            f"datagram {item.sequence_id} on circuit {self.circuit_id:#x} unacknowledged "
            f"after {item.attempts} attempts")
        self.outstanding.pop(item.sequence_id, None)
        item.error = err
        self.stats.failed += 1
        self.degraded = True
        self._emit(EventKind.DELIVERY_FAILED, Severity.CRITICAL,
                   sequence=item.sequence_id, attempts=item.attempts)
        if self.kind is BYTESTREAM:
            self.broken = err
            for other in list(self.outstanding.values()) + list(self.sendq):
                other.error = err
            self.outstanding.clear()
            self.sendq.clear()
        self._notify()

    # ------------------------------------------------------------ receiving
    def on_frame(self, fr: wire.Frame) -> None:
        keys = self.epochs.get(fr.key_epoch)
        if keys is None:
            if fr.key_epoch > self.epoch and len(self._future) < FUTURE_BUFFER:
                self._future.append(fr)
            else:
                self.stats.dropped += 1
            return
        header = fr.header()
        if not crypto.verify(keys.tag_keys[self.in_dir], fr.tag, header, fr.body):
            self.stats.dropped += 1
            return
        if fr.frame_type is wire.FrameType.ACK:
            self._on_ack(fr.sequence_id)
            return
        n = len(fr.body)
        if self.config.cipher_mode is CipherMode.ONE_TIME_PAD:
            pad = keys.pads[self.in_dir][fr.key_offset:fr.key_offset + n]
            if len(pad) != n:
                self.stats.dropped += 1
                return
        else:
            pad = crypto.keystream(keys.seeds[self.in_dir], self.circuit_id, fr.sequence_id, n)
        plaintext = crypto.xor_bytes(fr.body, pad)
        if self.kind.reliable:
            self._ack(fr, keys)
        if not self._dedup.first_time(fr.sequence_id):
            self.stats.dropped += 1
            return
        if self.kind is BYTESTREAM:
            self._rx_pending[fr.sequence_id] = (plaintext, bool(fr.flags & wire.FLAG_FIN))
            while self.rx_next in self._rx_pending:
                chunk, fin = self._rx_pending.pop(self.rx_next)
                self.rx_next += 1
                self._surface(chunk, fin)
        else:
            self._surface(plaintext, False)

    def _surface(self, data: bytes, fin: bool) -> None:
        self.stats.surfaced += 1
        if self.on_surface is not None:
            self.on_surface(data, fin)
        elif self.kind is BYTESTREAM:
            self.read_buffer += data
            if fin:
                self.eof = True
        else:
            self.inbox.append(data)
        self._notify()

    def _ack(self, fr: wire.Frame, keys: EpochKeys) -> None:
        ack = wire.Frame(wire.FrameType.ACK, self.kind.code, 0, self.circuit_id, fr.sequence_id,
                         fr.key_epoch, 0, b"")
        header = ack.header()
        self.host.send(self.peer, wire.DATA_LABEL,
                       header + crypto.tag(keys.tag_keys[self.out_dir], header))

    def _on_ack(self, seq: int) -> None:
        item = self.outstanding.pop(seq, None)
        if item is None:
            return
        item.done = True
        self.stats.delivered += 1
        self.pump()
        self._notify()

    # ---------------------------------------------------- synchronized draws
    def _sync_available(self) -> int:
        total, e, pos = 0, self.cursor_epoch, self.cursor_pos
        while e in self.epochs:
            total += len(self.epochs[e].region) - pos
            e, pos = e + 1, 0
        return total

    def try_draw_bytes(self, n: int) -> bytes | None:
        """Consume the next ``n`` region bytes, or request more and return None."""
        if self.kind is not SYNC:
            raise InvalidInput(f"sync draw on a {self.kind.value} circuit")
        if self.desync:
            raise DesyncError(f"circuit {self.circuit_id:#x} lost offset agreement; reopen it")
        if self.state is not State.OPEN:
            raise self.failure or CircuitUnavailable(f"circuit is {self.state.value}")
        if self._sync_available() < n:
            self.want_refresh()
            return None
        out = bytearray()
        while len(out) < n:
            region = self.epochs[self.cursor_epoch].region
            take = min(n - len(out), len(region) - self.cursor_pos)
            out += region[self.cursor_pos:self.cursor_pos + take]
            self.cursor_pos += take
            if self.cursor_pos == len(region):
                self.cursor_epoch += 1
                self.cursor_pos = 0
        self.stream_offset += n
        return bytes(out)

    def record_call(self) -> None:
        """Count one sync_random call and echo the offset when due."""
        self.call_index += 1
        period = self.config.echo_period
        if period and self.call_index % period == 0:
            self._echo_marks[self.call_index] = self.stream_offset
            self.host.ctl_notify(self.peer, wire.CtlType.ECHO, self.circuit_id,
                                 wire.pack_echo(self.call_index, self.stream_offset))
            self._check_echo(self.call_index)

    def _check_echo(self, k: int) -> None:
        if k in self._echo_marks and k in self._peer_echo:
            mine, theirs = self._echo_marks.pop(k), self._peer_echo.pop(k)
            if mine != theirs and not self.desync:
                self.desync = True
                self.degraded = True
                self._emit(EventKind.DESYNC, Severity.CRITICAL, call=k, local_offset=mine,
                           peer_offset=theirs)
                self._notify()

    # ----------------------------------------------------- application calls
    def _wait(self, pred, what: str, max_ticks: int | None = None) -> None:
        self.runtime.run_until(pred, max_ticks=max_ticks, what=what)

    def await_open(self) -> None:
        """Block while the circuit is still opening (the acceptor waits for its first epoch)."""
        if self.state is State.OPENING:
            self._wait(lambda: self.state is not State.OPENING, "circuit open")

    def send_lossy(self, payload: bytes) -> SendReceipt:
        if self.kind is not LOSSY:
            raise InvalidInput("send_lossy needs a secure_lossy_datagram circuit")
        self.await_open()
        item = self.submit(payload)
        self._wait(lambda: item.transmitted, "key material for a lossy send")
        if item.error is not None:
            raise item.error
        return SendReceipt(item.sequence_id, item.epoch, len(item.payload))

    def send_reliable(self, payload: bytes, wait: bool = True) -> Confirmation | Outgoing:
        if self.kind is not RELIABLE:
            raise InvalidInput("send_reliable needs a secure_reliable_datagram circuit")
        self.await_open()
        item = self.submit(payload)
        if not wait:
            return item
        self._wait(lambda: item.settled, "acknowledgement")
        if item.error is not None:
            raise item.error
        return Confirmation(item.sequence_id, item.epoch, item.attempts)

    def recv(self) -> bytes | None:
        self.runtime.poll()
        return self.inbox.popleft() if self.inbox else None

    def recv_all(self) -> list[bytes]:
        self.runtime.poll()
        out = list(self.inbox)
        self.inbox.clear()
        return out

    def stream_write(self, data: bytes) -> int:
        if self.kind is not BYTESTREAM:
            raise InvalidInput("stream_write needs a secure_reliable_bytestream circuit")
        if self.fin_queued:
            raise InvalidInput("stream already closed for writing")
        self.await_open()
        data = bytes(data)
        m = self.config.max_datagram_bytes
        for i in range(0, len(data), m):
            self.submit(data[i:i + m])
        return len(data)

    def stream_close(self) -> None:
        if self.kind is not BYTESTREAM:
            raise InvalidInput("stream_close needs a secure_reliable_bytestream circuit")
        self.await_open()
        if not self.fin_queued:
            self.submit(b"", flags=wire.FLAG_FIN)
            self.fin_queued = True

    def stream_read(self, max_bytes: int = -1) -> bytes:
        if self.kind is not BYTESTREAM:
            raise InvalidInput("stream_read needs a secure_reliable_bytestream circuit")
        self.runtime.poll()
        n = len(self.read_buffer) if max_bytes < 0 else min(max_bytes, len(self.read_buffer))
        out = bytes(self.read_buffer[:n])
        del self.read_buffer[:n]
        return out

    @property
    def idle(self) -> bool:
        return not self.sendq and not self.outstanding

    def drain(self, max_ticks: int | None = None) -> None:
        """Run until everything queued here is acknowledged."""
        self._wait(lambda: self.idle or self.broken is not None or self.state is not State.OPEN,
                   "drain", max_ticks)
        if self.broken is not None:
            raise self.broken
        if self.state is State.FAILED:
            raise self.failure

    def sync_random(self, n_bits: int) -> int:
        if self.kind is not SYNC:
            raise InvalidInput("sync_random needs a synchronized_random circuit")
        if n_bits < 1:
            raise InvalidInput("n_bits must be positive")
        self.runtime.poll()
        self.await_open()
        value, remaining = 0, n_bits
        while remaining:
            b = min(64, remaining)
            nbytes = -(-b // 8)
            got: list[bytes] = []

            def ready() -> bool:
                if not got:
                    raw = self.try_draw_bytes(nbytes)
                    if raw is not None:
                        got.append(raw)
                return bool(got) or self.state is not State.OPEN

            self._wait(ready, "synchronized key material")
            if not got:
                raise self.failure or KeyExhausted("no key material for sync_random")
            value = (value << b) | (int.from_bytes(got[0], "big") >> (8 * nbytes - b))
            remaining -= b
        self.record_call()
        return value

    def refresh_key(self) -> int:
        """Move both ends to a fresh epoch and return its number."""
        self.await_open()
        if self.state is not State.OPEN:
            raise self.failure or CircuitUnavailable(f"circuit is {self.state.value}")
        target = max(self.epoch, self._allocated if self.is_master else self._requested) + 1
        failures = self.key_failures
        if self.is_master:
            self.allocate()
        else:
            self.request_epoch(target)
        self._wait(lambda: self.epoch >= target or self.key_failures > failures, "key refresh")
        if self.epoch < target:
            raise KeyExhausted(f"key refresh failed on circuit {self.circuit_id:#x}")
        return self.epoch

    def close(self) -> None:
        if self.state is State.OPEN and self.kind.reliable and self.broken is None:
            self.drain()
        if self.state in (State.OPEN, State.OPENING):
            self.host.ctl_request(self.peer, wire.CtlType.CLOSE, self.circuit_id, b"")
            self.state = State.CLOSED
            self.runtime.poll()

    def snapshot(self) -> CircuitStats:
        return self.stats.copy()
