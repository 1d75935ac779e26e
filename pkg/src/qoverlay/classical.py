"""Simulated classical network between named nodes.

Time is an integer tick counter owned by the :class:`Network`. A message sent
at tick ``t`` over a channel with latency ``L`` becomes receivable at tick
``t + L`` unless the channel drops it. Queues are ordered by
``(deliver_tick, source, per-source send sequence)`` so delivery order never
depends on which execution context called :meth:`Network.send` first.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInput, UnknownNode


@dataclass(frozen=True)
class ClassicalChannelParams:
    drop_probability: float = 0.0
    latency_ticks: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise InvalidInput(f"drop_probability must lie in [0, 1], got {self.drop_probability}")
        if self.latency_ticks < 0:
            raise InvalidInput("latency_ticks must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Message:
    source: str
    destination: str
    channel_label: str
    payload: bytes
    message_id: int = -1


@dataclass(frozen=True)
class DeliveryTicket:
    message_id: int
    sent_tick: int
    deliver_tick: int | None  # None when the channel dropped the message

    @property
    def dropped(self) -> bool:
        return self.deliver_tick is None


# A tap sees every message that survives the drop decision and may return a
# replacement payload (or None to pass it through). Tests use it as the
# adversary on the wire.
Tap = Callable[[Message, int], "bytes | None"]


@dataclass
class _Flow:
    rng: np.random.Generator
    params: ClassicalChannelParams


@dataclass
class LinkStats:
    sent: int = 0
    dropped: int = 0
    delivered: int = 0


class Network:
    """Fully connected classical underlay with configurable loss and latency."""

    def __init__(self, default_params: ClassicalChannelParams | None = None):
        self.default_params = default_params or ClassicalChannelParams()
        self.now = 0
        self._nodes: dict[str, int] = {}
        self._pair_params: dict[frozenset, ClassicalChannelParams] = {}
        self._flows: dict[tuple[str, str], _Flow] = {}
        self._queues: dict[tuple[str, str], list] = defaultdict(list)
        self._next_id: dict[tuple[str, str], int] = defaultdict(int)
        self._send_seq: dict[str, itertools.count] = {}
        self._taps: list[Tap] = []
        self._down: set[frozenset] = set()
        self.stats: dict[tuple[str, str], LinkStats] = defaultdict(LinkStats)
        self._lock = threading.RLock()

    # -- topology -----------------------------------------------------------
    def add_node(self, name: str) -> None:
        if not name or not isinstance(name, str):
            raise InvalidInput("node name must be a non-empty string")
        with self._lock:
            if name in self._nodes:
                raise InvalidInput(f"node {name!r} already registered")
            self._nodes[name] = len(self._nodes)
            self._send_seq[name] = itertools.count()

    @property
    def nodes(self) -> list[str]:
        return list(self._nodes)

    def node_index(self, name: str) -> int:
        self._require(name)
        return self._nodes[name]

    def has_node(self, name: str) -> bool:
        return name in self._nodes

    def set_channel(self, a: str, b: str, params: ClassicalChannelParams) -> None:
        """Configure the channel between ``a`` and ``b`` (both directions)."""
        self._require(a)
        self._require(b)
        with self._lock:
            self._pair_params[frozenset((a, b))] = params
            for src, dst in ((a, b), (b, a)):
                self._flows.pop((src, dst), None)

    def channel_params(self, a: str, b: str) -> ClassicalChannelParams:
        return self._pair_params.get(frozenset((a, b)), self.default_params)

    def set_down(self, a: str, b: str, down: bool = True) -> None:
        """Administratively cut (or restore) the pair; a cut pair drops everything."""
        key = frozenset((a, b))
        if down:
            self._down.add(key)
        else:
            self._down.discard(key)

    def add_tap(self, tap: Tap) -> Tap:
        self._taps.append(tap)
        return tap

    def remove_tap(self, tap: Tap) -> None:
        self._taps.remove(tap)

    def _require(self, name: str) -> None:
        if name not in self._nodes:
            raise UnknownNode(f"unknown node {name!r}")

    def _flow(self, src: str, dst: str) -> _Flow:
        flow = self._flows.get((src, dst))
        if flow is None:
            params = self.channel_params(src, dst)
            # Each direction gets its own stream derived from the pair seed.
            ss = np.random.SeedSequence(
                [params.seed, self._nodes[src], self._nodes[dst]]
            )
            flow = self._flows[(src, dst)] = _Flow(np.random.default_rng(ss), params)
        return flow

    # -- transport ----------------------------------------------------------
    def next_message_id(self, source: str, label: str) -> int:
        with self._lock:
            mid = self._next_id[(source, label)]
            self._next_id[(source, label)] = mid + 1
            return mid

    def post(self, source: str, destination: str, label: str, payload: bytes) -> DeliveryTicket:
        """Allocate the next message id for (source, label) and send."""
        return self.send(Message(source, destination, label, bytes(payload)))

    def send(self, msg: Message, params: ClassicalChannelParams | None = None) -> DeliveryTicket:
        self._require(msg.source)
        self._require(msg.destination)
        if msg.source == msg.destination:
            raise InvalidInput("source and destination must differ")
        with self._lock:
            if msg.message_id < 0:
                msg = Message(msg.source, msg.destination, msg.channel_label, msg.payload,
                              self.next_message_id(msg.source, msg.channel_label))
            else:
                key = (msg.source, msg.channel_label)
                if msg.message_id < self._next_id[key]:
                    raise InvalidInput(
                        f"message_id {msg.message_id} does not increase for {key}"
                    )
                self._next_id[key] = msg.message_id + 1
            flow = self._flow(msg.source, msg.destination)
            p = params or flow.params
            stats = self.stats[(msg.source, msg.destination)]
            stats.sent += 1
            # Draw even when the outcome is forced so the stream position only
            # depends on the number of sends.
            u = flow.rng.random()
            if u < p.drop_probability or frozenset((msg.source, msg.destination)) in self._down:
                stats.dropped += 1
                return DeliveryTicket(msg.message_id, self.now, None)
            for tap in self._taps:
                replaced = tap(msg, self.now)
                if replaced is not None:
                    msg = Message(msg.source, msg.destination, msg.channel_label,
                                  bytes(replaced), msg.message_id)
            deliver = self.now + p.latency_ticks
            order = (deliver, self._nodes[msg.source], next(self._send_seq[msg.source]))
            heapq.heappush(self._queues[(msg.destination, msg.channel_label)], (order, msg))
            stats.delivered += 1
            return DeliveryTicket(msg.message_id, self.now, deliver)

    def receive(self, node: str, channel_label: str) -> Message | None:
        """Pop the next receivable message for ``node`` on ``channel_label``."""
        self._require(node)
        with self._lock:
            q = self._queues.get((node, channel_label))
            if q and q[0][0][0] <= self.now:
                return heapq.heappop(q)[1]
            return None

    def receive_all(self, node: str, channel_label: str) -> list[Message]:
        out = []
        while (m := self.receive(node, channel_label)) is not None:
            out.append(m)
        return out

    def pending(self, node: str | None = None) -> int:
        """Number of messages queued (delivered or in flight) for ``node`` or overall."""
        with self._lock:
            return sum(len(q) for (n, _), q in self._queues.items() if node is None or n == node)

    def has_deliverable(self, node: str, channel_label: str) -> bool:
        q = self._queues.get((node, channel_label))
        return bool(q) and q[0][0][0] <= self.now

    def next_delivery_tick(self, labels=None) -> int | None:
        """Earliest tick at which a queued message (on ``labels``) becomes receivable."""
        with self._lock:
            ticks = [q[0][0][0] for (_, label), q in self._queues.items()
                     if q and (labels is None or label in labels)]
            return min(ticks) if ticks else None

    def advance(self, ticks: int = 1) -> int:
        if ticks < 0:
            raise InvalidInput("cannot move the clock backwards")
        with self._lock:
            self.now += ticks
            return self.now
