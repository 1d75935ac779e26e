"""Centralised controller: links, paths, policies and the management loop."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Iterable

from ..classical import ClassicalChannelParams, Network
from ..errors import (
    CircuitUnavailable,
    DuplicateLink,
    InvalidInput,
    PathUnavailable,
    SessionTimeout,
    UnknownNode,
)
from ..management import (
    Event,
    EventKind,
    ManagementPlane,
    Severity,
    SuppressionRule,
    Thresholds,
    ThresholdWatcher,
)
from ..overlay import RELIABLE, CircuitConfig, Runtime, State
from ..qkd import QkdLink, QkdOutcome, QkdSessionParams
from ..quantum import QuantumLinkParams
from .paths import Path, hop_config, wire_path
from .policy import ActionRecord, Policy, check_registry, evaluate_policies, parse_policy


@dataclass(frozen=True)
class LinkSpec:
    endpoints: tuple[str, str]
    quantum: QuantumLinkParams = field(default_factory=QuantumLinkParams)
    classical: ClassicalChannelParams = field(default_factory=ClassicalChannelParams)
    qkd_defaults: QkdSessionParams | None = None
    low_watermark: int = 256

    def __post_init__(self):
        a, b = self.endpoints
        if a == b:
            raise InvalidInput("link endpoints must differ")

    @property
    def link_id(self) -> str:
        return f"{self.endpoints[0]}-{self.endpoints[1]}"


@dataclass(frozen=True)
class PathSpec:
    """A path given by its node sequence; consecutive nodes must be linked."""

    nodes: tuple[str, ...]
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.nodes) < 2:
            raise InvalidInput("a path needs at least two nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise InvalidInput("a path may not revisit a node")

    @property
    def hops(self) -> list[tuple[str, str]]:
        return list(zip(self.nodes, self.nodes[1:]))

    @property
    def relays(self) -> tuple[str, ...]:
        return self.nodes[1:-1]


class Controller:
    """Owns the network state and reacts to management events with policies."""

    def __init__(self, network: Network | None = None, parallel: bool = False,
                 thresholds: Thresholds = Thresholds(), suppression: Iterable[SuppressionRule] = (),
                 auto_refill: bool = True, watch_pools: bool = True):
        self.network = network or Network()
        self.management = ManagementPlane(suppression)
        self.runtime = Runtime(self.network, emit=self.management.emit, parallel=parallel,
                               auto_refill=auto_refill)
        self.watcher = ThresholdWatcher(self.runtime, thresholds)
        self.watch_pools = watch_pools
        self.trusted: set[str] = set()
        self.link_specs: dict[str, LinkSpec] = {}
        self.links: dict[str, QkdLink] = {}
        self.paths: dict[str, Path] = {}
        self.policies: list[Policy] = []
        self.action_log: list[ActionRecord] = []
        self.alerts: list[Event] = []
        self.management.policy_hook = self.evaluate_policies
        self.runtime.session_listeners.append(self._on_session)
        self.runtime.step_listeners.append(self._on_step)

    # topology ------------------------------------------------------------
    def add_node(self, name: str, trusted: bool = False) -> None:
        self.runtime.add_node(name)
        if trusted:
            self.trusted.add(name)

    def _require(self, name: str) -> None:
        if not self.network.has_node(name):
            raise UnknownNode(f"unknown node {name!r}")

    def configure_link(self, spec: LinkSpec, prefill: bool = False) -> str:
        a, b = spec.endpoints
        self._require(a)
        self._require(b)
        if self.runtime.link_between(a, b) is not None:
            raise DuplicateLink(f"a link between {a} and {b} already exists")
        params = spec.qkd_defaults or QkdSessionParams(seed=spec.quantum.seed)
        link = QkdLink(a, b, spec.quantum, params, low_watermark=spec.low_watermark)
        self.network.set_channel(a, b, spec.classical)
        self.runtime.add_link(link)
        self.link_specs[spec.link_id] = spec
        self.links[spec.link_id] = link
        if prefill:
            self.run_qkd(spec.link_id)
        return spec.link_id

    def link(self, link_id: str) -> QkdLink:
        try:
            return self.links[link_id]
        except KeyError:
            a, _, b = link_id.partition("-")
            link = self.runtime.link_between(a, b)
            if link is None:
                raise InvalidInput(f"unknown link {link_id!r}") from None
            return link

    @staticmethod
    def scope_of(link: QkdLink) -> str:
        return f"link:{link.a}-{link.b}"

    def link_for_scope(self, scope: str) -> QkdLink | None:
        if not scope.startswith("link:"):
            return None
        try:
            return self.link(scope[5:])
        except InvalidInput:
            return None

    def link_stats(self, link: QkdLink) -> dict[str, Any]:
        pool = link.pools[link.master]
        return {
            "pool_bytes": pool.available,
            "qber": link.last_qber,
            "sessions": pool.session_counter,
            "attempts": link.attempts,
            "down": self.runtime.is_link_down(link),
        }

    def run_qkd(self, link_id: str, pulse_count: int | None = None) -> QkdOutcome:
        return self.runtime.run_qkd(self.link(link_id), pulse_count=pulse_count)

    def open_circuit(self, local: str, peer: str, config: CircuitConfig):
        return self.runtime.open_circuit(local, peer, config)

    def circuits_on(self, link: QkdLink) -> list:
        ends = self.runtime.host(link.master).circuits.values()
        return [e for e in ends if e.link is link and e.state.value == "open"]

    # paths ---------------------------------------------------------------
    def establish_path(self, spec: PathSpec, config: CircuitConfig | None = None) -> str:
        config = config or CircuitConfig(RELIABLE)
        for node in spec.nodes:
            self._require(node)
        for i, node in enumerate(spec.relays, start=1):
            if node not in self.trusted:
                raise PathUnavailable(i, f"relay {node} is not trusted")
        for i, (a, b) in enumerate(spec.hops, start=1):
            if self.runtime.link_between(a, b) is None:
                raise PathUnavailable(i, f"no link between {a} and {b}")
        path_id = spec.name or f"path{len(self.paths) + 1}"
        if path_id in self.paths:
            raise InvalidInput(f"path {path_id!r} already exists")
        path = Path(path_id, list(spec.nodes), config, spec.hops)
        n = len(spec.hops)
        for i, (a, b) in enumerate(spec.hops):
            try:
                end = self.runtime.host(a).open_circuit(b, hop_config(config, i, n))
            except (CircuitUnavailable, SessionTimeout) as exc:
                raise PathUnavailable(i + 1, str(exc)) from exc
            peer = self.runtime.host(b).circuits[end.circuit_id]
            try:
                peer.await_open()
            except (CircuitUnavailable, SessionTimeout) as exc:
                raise PathUnavailable(i + 1, str(exc)) from exc
            if peer.state is not State.OPEN:
                raise PathUnavailable(i + 1, str(peer.failure or "acceptor did not open"))
            path.ends += [end, peer]
        wire_path(path)
        self.paths[path_id] = path
        return path_id

    def path(self, path_id: str) -> Path:
        try:
            return self.paths[path_id]
        except KeyError:
            raise InvalidInput(f"unknown path {path_id!r}") from None

    # policies ------------------------------------------------------------
    def add_policy(self, policy: Policy | str) -> Policy:
        if isinstance(policy, str):
            policy = parse_policy(policy)
        check_registry(self.policies + [policy])
        self.policies.append(policy)
        return policy

    def _target(self, policy: Policy, event: Event) -> str:
        if policy.action == "refresh_circuit_keys" and "circuit" in event.attributes:
            return f"circuit:{event.attributes['circuit']}"
        if policy.action == "raise_alert":
            return f"{event.scope}#{event.kind.value}"
        return event.scope

    def evaluate_policies(self, event: Event) -> list[ActionRecord]:
        if not self.policies:
            return []
        link = self.link_for_scope(event.scope)
        stats = self.link_stats(link) if link is not None else {}
        records = evaluate_policies(event, self.policies, self._execute, stats, self._target)
        self.action_log.extend(records)
        return records

    def _links_for(self, event: Event) -> list[QkdLink]:
        link = self.link_for_scope(event.scope)
        if link is not None:
            return [link]
        if event.scope.startswith("path:"):
            path = self.path(event.scope[5:])
            return [self.runtime.link_between(a, b) for a, b in path.hops]
        return list(self.links.values())

    def _execute(self, policy: Policy, event: Event) -> str:
        action = policy.action
        if action == "trigger_qkd_session":
            outs = [self.runtime.run_qkd(link) for link in self._links_for(event)]
            return ",".join(o.status.value for o in outs)
        if action == "refresh_circuit_keys":
            epochs = []
            for link in self._links_for(event):
                for end in self.circuits_on(link):
                    if "circuit" in event.attributes and end.circuit_id != event.attributes["circuit"]:
                        continue
                    epochs.append(end.refresh_key())
            return "epochs=" + ",".join(map(str, epochs))
        if action == "mark_link_down":
            for link in self._links_for(event):
                self.mark_link_down(link)
            return ""
        if action == "raise_alert":
            self.alerts.append(event)
            return ""
        if action == "set_param":
            name, value = policy.args
            return self.set_param(str(name), value, self._links_for(event))
        raise InvalidInput(f"unknown action {action}")

    def mark_link_down(self, link: QkdLink, down: bool = True) -> None:
        if self.runtime.is_link_down(link) == down:
            return
        self.runtime.set_link_down(link, down)
        if down:
            self.runtime.emit(Event(self.runtime.now, self.scope_of(link), EventKind.LINK_DOWN,
                                    Severity.CRITICAL, {}))

    def set_param(self, name: str, value: Any, links: Iterable[QkdLink] = ()) -> str:
        if name in {f.name for f in fields(Thresholds)}:
            self.watcher.thresholds = replace(self.watcher.thresholds, **{name: value})
            return f"{name}={value}"
        if name in {f.name for f in fields(QkdSessionParams)}:
            for link in links:
                link.params = replace(link.params, **{name: value})
            return f"{name}={value}"
        if name == "low_watermark":
            for link in links:
                for pool in link.pools.values():
                    pool.low_watermark = int(value)
            return f"{name}={value}"
        raise InvalidInput(f"unknown parameter {name!r}")

    # management loop -----------------------------------------------------
    def _on_session(self, link: QkdLink, out: QkdOutcome) -> None:
        if out.sifted_bits:
            self.watcher.observe(self.runtime.now, self.scope_of(link), qber=out.qber_estimate)

    def _on_step(self) -> None:
        if not self.watch_pools:
            return
        for link in self.links.values():
            pool = link.pools[link.master]
            if pool.session_counter:
                self.watcher.observe(self.runtime.now, self.scope_of(link), pool_bytes=pool.available)

    def observe(self, link_id: str, qber: float | None = None, pool_bytes: int | None = None) -> list[Event]:
        """Feed a link statistic to the threshold watcher (scripted scenarios)."""
        link = self.link(link_id)
        events = self.watcher.observe(self.runtime.now, self.scope_of(link), qber=qber,
                                      pool_bytes=pool_bytes)
        self.runtime.poll()
        return events

    def run_ticks(self, ticks: int) -> None:
        self.runtime.run_ticks(ticks)

    def flush(self) -> None:
        self.runtime.poll()
        self.management.flush(self.runtime.now)

    def close(self) -> None:
        self.runtime.close()
