"""Events, suppression, the append-only event log and threshold watching.

Log records are single lines with a fixed field order::

    tick=<n> scope=<s> kind=<KIND> sev=<severity> <attr>=<value> ...

Attributes follow in sorted key order. Integers print in decimal, floats with
``%.6g``, booleans as ``true``/``false``. A suppression summary is written as
``kind=SUPPRESSED sev=info`` with ``count``, ``suppressed_kind`` and
``window_start`` attributes.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .errors import InvalidEvent, InvalidFilter


class EventKind(str, enum.Enum):
    QBER_HIGH = "QBER_HIGH"
    KEY_POOL_LOW = "KEY_POOL_LOW"
    LINK_DOWN = "LINK_DOWN"
    DELIVERY_FAILED = "DELIVERY_FAILED"
    DESYNC = "DESYNC"
    SESSION_ABORTED = "SESSION_ABORTED"
    EPOCH_ROLLED = "EPOCH_ROLLED"


class Severity(str, enum.Enum):
    INFO = "info"
    WARNING = "warning"
    CRITICAL = "critical"


REQUIRED_ATTRIBUTES: dict[EventKind, tuple[str, ...]] = {
    EventKind.QBER_HIGH: ("qber",),
    EventKind.KEY_POOL_LOW: ("pool_bytes",),
    EventKind.DELIVERY_FAILED: ("circuit",),
    EventKind.DESYNC: ("circuit",),
    EventKind.SESSION_ABORTED: ("status",),
    EventKind.EPOCH_ROLLED: ("circuit", "epoch"),
    EventKind.LINK_DOWN: (),
}

SUPPRESSED = "SUPPRESSED"


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return "%.6g" % value
    text = str(value)
    return "".join("_" if ch.isspace() or ch == "=" else ch for ch in text) or "-"


def _parse_value(text: str) -> Any:
    if text in ("true", "false"):
        return text == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class Event:
    tick: int
    scope: str
    kind: EventKind
    severity: Severity = Severity.WARNING
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", EventKind(self.kind))
            object.__setattr__(self, "severity", Severity(self.severity))
        except ValueError as exc:
            raise InvalidEvent(str(exc)) from None
        if self.tick < 0:
            raise InvalidEvent("tick must be non-negative")
        if not self.scope or any(ch.isspace() for ch in self.scope):
            raise InvalidEvent(f"bad scope {self.scope!r}")
        missing = [a for a in REQUIRED_ATTRIBUTES[self.kind] if a not in self.attributes]
        if missing:
            raise InvalidEvent(f"{self.kind.value} requires attributes {missing}")
        object.__setattr__(self, "attributes", dict(sorted(self.attributes.items())))

    def to_line(self) -> str:
        parts = [f"tick={self.tick}", f"scope={self.scope}", f"kind={self.kind.value}",
                 f"sev={self.severity.value}"]
        parts += [f"{k}={_fmt(v)}" for k, v in self.attributes.items()]
        return " ".join(parts)


@dataclass(frozen=True)
class SuppressionSummary:
    tick: int
    scope: str
    suppressed_kind: EventKind
    window_start: int
    count: int

    kind = SUPPRESSED

    def to_line(self) -> str:
        return (f"tick={self.tick} scope={self.scope} kind={SUPPRESSED} sev=info "
                f"count={self.count} suppressed_kind={self.suppressed_kind.value} "
                f"window_start={self.window_start}")


def parse_line(line: str) -> Event | SuppressionSummary:
    fields = dict(tok.split("=", 1) for tok in line.split())
    try:
        tick, scope, kind, sev = (fields.pop(k) for k in ("tick", "scope", "kind", "sev"))
    except KeyError as exc:
        raise InvalidEvent(f"record lacks {exc}") from None
    if kind == SUPPRESSED:
        return SuppressionSummary(int(tick), scope, EventKind(fields["suppressed_kind"]),
                                  int(fields["window_start"]), int(fields["count"]))
    return Event(int(tick), scope, EventKind(kind), Severity(sev),
                 {k: _parse_value(v) for k, v in fields.items()})


@dataclass(frozen=True)
class SuppressionRule:
    kind: EventKind
    window_ticks: int
    max_per_window: int

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if self.window_ticks < 1 or self.max_per_window < 1:
            raise InvalidEvent("window_ticks and max_per_window must be positive")


@dataclass
class _Window:
    start: int
    passed: int = 0
    suppressed: int = 0


def query(
    records: Iterable,
    kind: str | EventKind | None = None,
    severity: str | Severity | None = None,
    scope: str | None = None,
    tick_range: tuple[int, int] | None = None,
    include_summaries: bool = False,
) -> list:
    """Records matching every given filter, in tick order.

    ``tick_range`` is inclusive at both ends.
    """
    try:
        kind = None if kind is None else (kind if kind == SUPPRESSED else EventKind(kind))
        severity = None if severity is None else Severity(severity)
    except ValueError as exc:
        raise InvalidFilter(str(exc)) from None
    if tick_range is not None:
        if len(tick_range) != 2 or tick_range[0] > tick_range[1]:
            raise InvalidFilter(f"bad tick range {tick_range!r}")
    out = []
    for rec in records:
        summary = isinstance(rec, SuppressionSummary)
        if summary and not (include_summaries or kind == SUPPRESSED):
            continue
        if kind is not None and rec.kind != kind:
            continue
        if severity is not None and (summary or rec.severity is not severity):
            continue
        if scope is not None and rec.scope != scope:
            continue
        if tick_range is not None and not tick_range[0] <= rec.tick <= tick_range[1]:
            continue
        out.append(rec)
    return sorted(out, key=lambda r: r.tick)


class EventLog:
    """Append-only record store; appends are serialised, reads see a snapshot."""

    def __init__(self):
        self._records: list = []
        self._lock = threading.Lock()

    def append(self, rec) -> None:
        with self._lock:
            if self._records and rec.tick < self._records[-1].tick:
                raise InvalidEvent(
                    f"tick {rec.tick} precedes last logged tick {self._records[-1].tick}")
            self._records.append(rec)

    @property
    def records(self) -> tuple:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def events(self) -> list[Event]:
        return [r for r in self.records if isinstance(r, Event)]

    def lines(self) -> list[str]:
        return [r.to_line() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())

    @classmethod
    def load(cls, path) -> "EventLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.append(parse_line(line))
        return log

    def query(self, **filters) -> list:
        return query(self.records, **filters)


class ManagementPlane:
    """Receives events, applies suppression, logs, and dispatches.

    Events emitted while a previous emission is still being dispatched (for
    instance by a policy action) are queued and handled in order afterwards.
    """

    def __init__(self, rules: Iterable[SuppressionRule] = ()):
        self.log = EventLog()
        self.rules: dict[EventKind, SuppressionRule] = {r.kind: r for r in rules}
        self.subscribers: list[Callable[[Event], None]] = []
        self.policy_hook: Callable[[Event], Any] | None = None
        self._windows: dict[tuple[EventKind, str], _Window] = {}
        self._queue: deque = deque()
        self._dispatching = False
        self._lock = threading.RLock()

    def add_rule(self, rule: SuppressionRule) -> None:
        self.rules[rule.kind] = rule

    def subscribe(self, fn: Callable[[Event], None]) -> None:
        self.subscribers.append(fn)

    def emit(self, event: Event) -> None:
        with self._lock:
            self._queue.append(event)
            if self._dispatching:
                return
            self._dispatching = True
        try:
            while True:
                with self._lock:
                    if not self._queue:
                        self._dispatching = False
                        return
                    ev = self._queue.popleft()
                if self._admit(ev):
                    self.log.append(ev)
                    for fn in list(self.subscribers):
                        fn(ev)
                    if self.policy_hook is not None:
                        self.policy_hook(ev)
        except BaseException:
            with self._lock:
                self._dispatching = False
            raise

    def _admit(self, ev: Event) -> bool:
        rule = self.rules.get(ev.kind)
        if rule is None:
            return True
        key = (ev.kind, ev.scope)
        win = self._windows.get(key)
        if win is None or ev.tick >= win.start + rule.window_ticks:
            if win is not None and win.suppressed:
                self.log.append(SuppressionSummary(ev.tick, ev.scope, ev.kind, win.start, win.suppressed))
            win = self._windows[key] = _Window(ev.tick)
        if win.passed < rule.max_per_window:
            win.passed += 1
            return True
        win.suppressed += 1
        return False

    def flush(self, tick: int) -> None:
        """Write summaries for every window that suppressed something."""
        with self._lock:
            for (kind, scope), win in sorted(self._windows.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
                if win.suppressed:
                    self.log.append(SuppressionSummary(max(tick, win.start), scope, kind,
                                                       win.start, win.suppressed))
                    win.suppressed = 0

    def query(self, **filters) -> list:
        return self.log.query(**filters)


@dataclass(frozen=True)
class Thresholds:
    qber_high: float = 0.11
    pool_low_bytes: int = 256


class ThresholdWatcher:
    """Edge-triggered threshold crossing detector.

    An event fires when a metric crosses into the alarming region; the alarm
    re-arms only after the metric has returned to the normal side.
    """

    def __init__(self, plane: ManagementPlane | None, thresholds: Thresholds = Thresholds()):
        self.plane = plane
        self.thresholds = thresholds
        self._armed: dict[tuple[str, str], bool] = {}

    def observe(self, tick: int, scope: str, qber: float | None = None,
                pool_bytes: int | None = None) -> list[Event]:
        emitted = []
        if qber is not None:
            if self._edge(scope, "qber", qber > self.thresholds.qber_high):
                emitted.append(Event(tick, scope, EventKind.QBER_HIGH, Severity.CRITICAL,
                                     {"qber": float(qber), "threshold": self.thresholds.qber_high}))
        if pool_bytes is not None:
            if self._edge(scope, "pool", pool_bytes < self.thresholds.pool_low_bytes):
                emitted.append(Event(tick, scope, EventKind.KEY_POOL_LOW, Severity.WARNING,
                                     {"pool_bytes": int(pool_bytes),
                                      "threshold": self.thresholds.pool_low_bytes}))
        if self.plane is not None:
            for ev in emitted:
                self.plane.emit(ev)
        return emitted

    def _edge(self, scope: str, metric: str, alarming: bool) -> bool:
        key = (scope, metric)
        armed = self._armed.get(key, True)
        if alarming and armed:
            self._armed[key] = False
            return True
        if not alarming:
            self._armed[key] = True
        return False


def watch_thresholds(watcher: ThresholdWatcher, tick: int, scope: str, stats: Mapping[str, Any]) -> list[Event]:
    return watcher.observe(tick, scope, qber=stats.get("qber"), pool_bytes=stats.get("pool_bytes"))
