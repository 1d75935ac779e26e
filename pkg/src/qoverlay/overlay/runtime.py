"""Node hosts and the tick-driven scheduler that runs them.

Every node runs a :class:`Host`. Hosts react to classical messages and
timers without blocking; anything they send, emit or schedule is buffered and
committed in host order after each phase, so a phase yields the same result
whether hosts run one after another or concurrently (``parallel=True``).

Blocking application calls go through :meth:`Runtime.run_until`, which
settles pending messages, runs maintenance (QKD sessions) and advances the
clock, skipping idle ticks, until a predicate holds.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..classical import Message, Network
from ..errors import CircuitUnavailable, InvalidInput, SessionTimeout, UnknownNode
from ..management import Event, EventKind, Severity
from ..qkd import QkdLink, QkdOutcome, Status
from . import wire
from .circuit import CircuitEnd, State
from .config import CircuitConfig

LABELS = (wire.CTL_LABEL, wire.DATA_LABEL)
CTL_MAX_ATTEMPTS = 64
REPLY_CACHE = 4096


@dataclass
class _PendingCtl:
    dst: str
    payload: bytes
    deadline: int
    timeout: int
    attempts: int = 1
    on_reply: Callable[[], None] | None = None
    on_fail: Callable[[], None] | None = None


@dataclass
class _Refill:
    link: QkdLink
    target: int
    callbacks: list = field(default_factory=list)


class Host:
    """Per-node overlay endpoint: circuit table plus a reliable control channel."""

    def __init__(self, runtime: "Runtime", name: str):
        self.runtime = runtime
        self.name = name
        self.index = runtime.network.node_index(name)
        self.circuits: dict[int, CircuitEnd] = {}
        self.accepted: list[CircuitEnd] = []
        self.accept_hooks: list[Callable[[CircuitEnd], None]] = []
        self.timer_hooks: list[Callable[[], None]] = []
        self._cid = 0
        self._rid = 0
        self._pending: dict[int, _PendingCtl] = {}
        self._replies: OrderedDict[tuple[str, int], bytes] = OrderedDict()
        self.outbox: list[tuple[str, str, bytes]] = []
        self.events: list[Event] = []
        self.refills: list[tuple[QkdLink, int, Callable | None]] = []

    def __repr__(self) -> str:
        return f"Host({self.name!r})"

    # buffered side effects --------------------------------------------------
    def send(self, dst: str, label: str, payload: bytes) -> None:
        self.outbox.append((dst, label, payload))
        self.runtime._commit_if_idle(self)

    def emit(self, event: Event) -> None:
        self.events.append(event)
        self.runtime._commit_if_idle(self)

    def schedule_refill(self, link: QkdLink, target: int, callback) -> None:
        self.refills.append((link, target, callback))
        self.runtime._commit_if_idle(self)

    # control channel -------------------------------------------------------
    def _ctl_timeout(self, dst: str) -> int:
        return 2 * self.runtime.network.channel_params(self.name, dst).latency_ticks + 2

    def ctl_request(self, dst: str, ctl_type: wire.CtlType, cid: int, body: bytes,
                    on_reply: Callable[[], None] | None = None,
                    on_fail: Callable[[], None] | None = None) -> int:
        self._rid += 1
        payload = wire.Ctl(ctl_type, cid, self._rid, body).encode()
        timeout = self._ctl_timeout(dst)
        self._pending[self._rid] = _PendingCtl(dst, payload, self.runtime.now + timeout, timeout,
                                               on_reply=on_reply, on_fail=on_fail)
        self.send(dst, wire.CTL_LABEL, payload)
        return self._rid

    def ctl_notify(self, dst: str, ctl_type: wire.CtlType, cid: int, body: bytes) -> None:
        """Fire-and-forget control record (request id 0, never answered)."""
        self.send(dst, wire.CTL_LABEL, wire.Ctl(ctl_type, cid, 0, body).encode())

    # circuits --------------------------------------------------------------
    def new_circuit_id(self) -> int:
        self._cid += 1
        return (self.index << 32) | self._cid

    def open_circuit(self, peer: str, config: CircuitConfig, wait: bool = True) -> CircuitEnd:
        if not self.runtime.network.has_node(peer):
            raise UnknownNode(f"unknown node {peer!r}")
        if peer == self.name:
            raise InvalidInput("a circuit needs two distinct endpoints")
        link = self.runtime.link_between(self.name, peer)
        if link is None:
            raise CircuitUnavailable(f"no link between {self.name} and {peer}")
        end = CircuitEnd(self, self.new_circuit_id(), config, peer, link, opener=True)
        self.circuits[end.circuit_id] = end
        self.ctl_request(peer, wire.CtlType.OPEN, end.circuit_id, wire.pack_text(config.to_json()),
                         on_reply=end.on_open_ack, on_fail=end.on_open_lost)
        if wait:
            self.runtime.run_until(lambda: end.state is not State.OPENING, what="circuit open")
            if end.state is State.FAILED:
                raise end.failure
        return end

    def _accept(self, src: str, ctl: wire.Ctl) -> bool:
        if ctl.circuit_id in self.circuits:
            return True
        link = self.runtime.link_between(self.name, src)
        if link is None:
            return False
        config = CircuitConfig.from_json(wire.unpack_text(ctl.body))
        end = CircuitEnd(self, ctl.circuit_id, config, src, link, opener=False)
        self.circuits[end.circuit_id] = end
        self.accepted.append(end)
        for hook in list(self.accept_hooks):
            hook(end)
        if end.is_master:
            end.allocate()
        return True

    # processing ------------------------------------------------------------
    def process(self, batch: Iterable[Message]) -> None:
        for msg in batch:
            try:
                if msg.channel_label == wire.CTL_LABEL:
                    self._on_ctl(msg.source, wire.decode_ctl(msg.payload))
                else:
                    fr = wire.decode_frame(msg.payload)
                    end = self.circuits.get(fr.circuit_id)
                    if end is not None and end.peer == msg.source:
                        end.on_frame(fr)
            except (InvalidInput, ValueError, struct.error):
                continue  # malformed or tampered record: discard

    def _on_ctl(self, src: str, ctl: wire.Ctl) -> None:
        if ctl.reply:
            pending = self._pending.get(ctl.request_id)
            if pending is not None and pending.dst == src:
                del self._pending[ctl.request_id]
                if pending.on_reply is not None:
                    pending.on_reply()
            return
        key = (src, ctl.request_id)
        if ctl.request_id and key in self._replies:
            self.send(src, wire.CTL_LABEL, self._replies[key])
            return
        if ctl.ctl_type is wire.CtlType.OPEN:
            handled = self._accept(src, ctl)
        else:
            end = self.circuits.get(ctl.circuit_id)
            handled = end is not None and end.peer == src
            if handled:
                end.on_ctl(ctl)
        if handled and ctl.request_id:
            reply = wire.Ctl(ctl.ctl_type, ctl.circuit_id, ctl.request_id, b"", reply=True).encode()
            self._replies[key] = reply
            if len(self._replies) > REPLY_CACHE:
                self._replies.popitem(last=False)
            self.send(src, wire.CTL_LABEL, reply)

    def on_timer(self) -> None:
        now = self.runtime.now
        for rid in sorted(r for r, p in self._pending.items() if p.deadline <= now):
            p = self._pending[rid]
            if p.attempts >= CTL_MAX_ATTEMPTS:
                del self._pending[rid]
                if p.on_fail is not None:
                    p.on_fail()
                continue
            p.attempts += 1
            p.deadline = now + p.timeout
            self.send(p.dst, wire.CTL_LABEL, p.payload)
        for cid in sorted(self.circuits):
            self.circuits[cid].on_timer()
        for hook in list(self.timer_hooks):
            hook()

    def next_deadline(self) -> int | None:
        cands = [p.deadline for p in self._pending.values()]
        for end in self.circuits.values():
            d = end.next_deadline()
            if d is not None:
                cands.append(d)
        return min(cands) if cands else None


class Runtime:
    """Owns the network, the links and one :class:`Host` per node."""

    def __init__(self, network: Network | None = None, emit: Callable[[Event], None] | None = None,
                 parallel: bool = False, auto_refill: bool = True, max_wait_ticks: int = 200_000,
                 workers: int | None = None):
        self.network = network or Network()
        self.emit_sink = emit
        self.parallel = parallel
        self.auto_refill = auto_refill
        self.max_wait_ticks = max_wait_ticks
        self.links: dict[frozenset, QkdLink] = {}
        self.hosts: dict[str, Host] = {}
        self.down_links: set[frozenset] = set()
        self.session_listeners: list[Callable[[QkdLink, QkdOutcome], None]] = []
        self.step_listeners: list[Callable[[], None]] = []
        self._events: list[Event] = []
        self._refills: list[_Refill] = []
        self._in_phase = False
        self._in_maintenance = False
        self._executor = ThreadPoolExecutor(max_workers=workers) if parallel else None
        for name in self.network.nodes:
            self.hosts[name] = Host(self, name)

    # topology ----------------------------------------------------------------
    @property
    def now(self) -> int:
        return self.network.now

    def add_node(self, name: str) -> Host:
        if not self.network.has_node(name):
            self.network.add_node(name)
        if name not in self.hosts:
            self.hosts[name] = Host(self, name)
        return self.hosts[name]

    def host(self, name: str) -> Host:
        try:
            return self.hosts[name]
        except KeyError:
            raise UnknownNode(f"unknown node {name!r}") from None

    def add_link(self, link: QkdLink) -> QkdLink:
        for n in (link.a, link.b):
            self.host(n)
        self.links[frozenset((link.a, link.b))] = link
        return link

    def link_between(self, a: str, b: str) -> QkdLink | None:
        return self.links.get(frozenset((a, b)))

    def is_link_down(self, link: QkdLink) -> bool:
        return frozenset((link.a, link.b)) in self.down_links

    def set_link_down(self, link: QkdLink, down: bool = True) -> None:
        key = frozenset((link.a, link.b))
        if down:
            self.down_links.add(key)
        else:
            self.down_links.discard(key)

    def open_circuit(self, local: str, peer: str, config: CircuitConfig) -> CircuitEnd:
        return self.host(local).open_circuit(peer, config)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    # event and maintenance buffers ---------------------------------------
    def emit(self, event: Event) -> None:
        self._events.append(event)

    def _commit_if_idle(self, host: Host) -> None:
        if not self._in_phase:
            self._commit(host)

    def _commit(self, host: Host) -> None:
        out, host.outbox = host.outbox, []
        for dst, label, payload in out:
            self.network.post(host.name, dst, label, payload)
        self._events.extend(host.events)
        host.events = []
        refills, host.refills = host.refills, []
        for link, target, cb in refills:
            self._queue_refill(link, target, cb)

    def _queue_refill(self, link: QkdLink, target: int, cb) -> None:
        for r in self._refills:
            if r.link is link:
                r.target = max(r.target, target)
                if cb is not None:
                    r.callbacks.append(cb)
                return
        self._refills.append(_Refill(link, target, [cb] if cb is not None else []))

    # phases --------------------------------------------------------------
    def _phase(self, work: dict[Host, Callable[[], None]]) -> None:
        self._in_phase = True
        try:
            if self._executor is not None and len(work) > 1:
                futures = [self._executor.submit(fn) for fn in work.values()]
                for f in futures:
                    f.result()
            else:
                for fn in work.values():
                    fn()
        finally:
            self._in_phase = False
        for host in self.hosts.values():
            self._commit(host)

    def settle(self) -> None:
        """Deliver everything receivable at the current tick."""
        while True:
            work = {}
            for host in self.hosts.values():
                batch = []
                for label in LABELS:
                    batch.extend(self.network.receive_all(host.name, label))
                if batch:
                    work[host] = (lambda h=host, b=batch: h.process(b))
            if not work:
                return
            self._phase(work)

    def _timers(self) -> None:
        self._phase({h: h.on_timer for h in self.hosts.values()})

    def _tick(self, ticks: int = 1) -> None:
        self.network.advance(ticks)
        self.settle()
        self._timers()
        self.settle()

    def _next_event_tick(self) -> int | None:
        cands = [t for t in (self.network.next_delivery_tick(LABELS),) if t is not None]
        for h in self.hosts.values():
            d = h.next_deadline()
            if d is not None:
                cands.append(d)
        return min(cands) if cands else None

    # maintenance ---------------------------------------------------------
    def run_qkd(self, link: QkdLink, pulse_count: int | None = None) -> QkdOutcome:
        """Run one QKD session on ``link``, pumping the hosts while it waits."""
        if self.is_link_down(link):
            raise CircuitUnavailable(f"link {link.a}-{link.b} is down")
        nested = self._in_maintenance
        self._in_maintenance = True
        try:
            out = link.run_session(self.network, advance=self._tick, pulse_count=pulse_count)
        except SessionTimeout:
            out = QkdOutcome(Status.ABORTED_INSUFFICIENT, 0.0, 0, 0, link.params.pulse_count,
                             detail="timeout")
            link.history.append(out)
        finally:
            self._in_maintenance = nested
        scope = f"link:{link.a}-{link.b}"
        if not out.ok:
            attrs = {"status": out.status.value, "session": link.attempts - 1}
            if out.sifted_bits:
                attrs["qber"] = out.qber_estimate
            if out.detail:
                attrs["detail"] = out.detail
            self.emit(Event(self.now, scope, EventKind.SESSION_ABORTED, Severity.WARNING, attrs))
        for fn in list(self.session_listeners):
            fn(link, out)
        return out

    def _run_refill(self, r: _Refill) -> None:
        pool = r.link.pools[r.link.master]
        ok, status = True, "ok"
        sessions = 0
        while pool.available < r.target:
            if self.is_link_down(r.link):
                ok, status = False, "link_down"
                break
            out = self.run_qkd(r.link)
            sessions += 1
            if not out.ok:
                ok, status = False, out.status.value
                break
            if sessions >= 256:
                ok, status = False, "refill_limit"
                break
        for cb in r.callbacks:
            cb(ok, status)
        # Callbacks run outside any phase; push what they buffered.
        for host in self.hosts.values():
            self._commit(host)

    def _flush_events(self) -> None:
        while self._events:
            ev = self._events.pop(0)
            if self.emit_sink is not None:
                self.emit_sink(ev)

    def poll(self) -> None:
        """Settle, run pending maintenance and dispatch events at the current tick."""
        if self._in_phase:
            raise RuntimeError("blocking overlay call from inside a host callback")
        while True:
            self.settle()
            if self._refills and not self._in_maintenance:
                self._run_refill(self._refills.pop(0))
                continue
            if self._events and not self._in_maintenance:
                self._flush_events()
                continue
            break
        if not self._in_maintenance:
            for fn in list(self.step_listeners):
                fn()
            if self._events:
                self.poll()

    def run_until(self, pred: Callable[[], bool], max_ticks: int | None = None,
                  what: str = "condition") -> None:
        limit = self.now + (self.max_wait_ticks if max_ticks is None else max_ticks)
        while True:
            self.poll()
            if pred():
                return
            nxt = self._next_event_tick()
            if nxt is None:
                raise SessionTimeout(f"stalled at tick {self.now} waiting for {what}")
            target = max(self.now + 1, nxt)
            if target > limit:
                raise SessionTimeout(f"gave up at tick {self.now} waiting for {what}")
            self._tick(target - self.now)

    def run_ticks(self, ticks: int) -> None:
        """Advance the clock by ``ticks``, processing everything due on the way."""
        end = self.now + ticks
        while True:
            self.poll()
            if self.now >= end:
                return
            nxt = self._next_event_tick()
            target = end if nxt is None else min(end, max(self.now + 1, nxt))
            self._tick(target - self.now)
