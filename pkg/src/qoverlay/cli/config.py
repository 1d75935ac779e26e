"""Line-oriented topology files.

A file is a sequence of blocks. Each block opens with a ``[section]`` header
and holds ``key = value`` lines; ``#`` starts a comment. Sections:

``[node]``      name, trusted
``[link]``      a, b, loss, flip, eavesdropper, drop, latency, seed, low_watermark
``[path]``      name, nodes (comma separated)
``[policy]``    rule (one policy per block)
``[defaults]``  any QKD session parameter, e.g. ``pulse_count = 20000``

Every error carries the line number it was detected on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path as FsPath

import numpy as np

from ..classical import ClassicalChannelParams
from ..control import Controller, LinkSpec, Policy, parse_policy
from ..control.policy import check_registry
from ..errors import ConfigError, QOverlayError
from ..qkd import QkdSessionParams
from ..quantum import Eavesdropper, QuantumLinkParams

SECTIONS = ("node", "link", "path", "policy", "defaults")

_KEYS = {
    "node": {"name", "trusted"},
    "link": {"a", "b", "loss", "flip", "eavesdropper", "drop", "latency", "seed", "low_watermark"},
    "path": {"name", "nodes"},
    "policy": {"rule"},
    "defaults": {f.name for f in fields(QkdSessionParams)} - {"seed"},
}
_REQUIRED = {"node": {"name"}, "link": {"a", "b"}, "path": {"nodes"}, "policy": {"rule"}, "defaults": set()}


@dataclass
class NodeEntry:
    name: str
    trusted: bool = False
    line: int = 0


@dataclass
class LinkEntry:
    a: str
    b: str
    loss: float = 0.1
    flip: float = 0.01
    eavesdropper: Eavesdropper = Eavesdropper.NONE
    drop: float = 0.0
    latency: int = 1
    seed: int | None = None
    low_watermark: int = 256
    line: int = 0

    @property
    def link_id(self) -> str:
        return f"{self.a}-{self.b}"


@dataclass
class PathEntry:
    name: str
    nodes: tuple[str, ...]
    line: int = 0


@dataclass
class TopologyConfig:
    nodes: list[NodeEntry] = field(default_factory=list)
    links: list[LinkEntry] = field(default_factory=list)
    paths: list[PathEntry] = field(default_factory=list)
    policies: list[Policy] = field(default_factory=list)
    defaults: dict[str, object] = field(default_factory=dict)

    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def find_link(self, a: str, b: str) -> LinkEntry | None:
        for link in self.links:
            if {link.a, link.b} == {a, b}:
                return link
        return None

    def find_path(self, name: str) -> PathEntry | None:
        return next((p for p in self.paths if p.name == name), None)


def default_topology() -> TopologyConfig:
    """Two nodes joined by one link."""
    return TopologyConfig(nodes=[NodeEntry("A"), NodeEntry("B")], links=[LinkEntry("A", "B")])


def _bool(text: str, line: int) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}", line)


def _number(kind, text: str, line: int, key: str):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}", line) from None


def _build(section: str, entries: dict[str, tuple[str, int]], start: int, cfg: TopologyConfig) -> None:
    missing = _REQUIRED[section] - entries.keys()
    if missing:
        raise ConfigError(f"[{section}] block is missing {', '.join(sorted(missing))}", start)
    val = {k: v for k, (v, _) in entries.items()}
    at = {k: ln for k, (_, ln) in entries.items()}
    if section == "node":
        trusted = _bool(val["trusted"], at["trusted"]) if "trusted" in val else False
        cfg.nodes.append(NodeEntry(val["name"], trusted, start))
    elif section == "link":
        link = LinkEntry(val["a"], val["b"], line=start)
        for key, kind in (("loss", float), ("flip", float), ("drop", float), ("latency", int),
                          ("seed", int), ("low_watermark", int)):
            if key in val:
                setattr(link, key, _number(kind, val[key], at[key], key))
        if "eavesdropper" in val:
            try:
                link.eavesdropper = Eavesdropper(val["eavesdropper"])
            except ValueError:
                raise ConfigError(f"unknown eavesdropper {val['eavesdropper']!r}", at["eavesdropper"]) from None
        cfg.links.append(link)
    elif section == "path":
        nodes = tuple(n.strip() for n in val["nodes"].split(",") if n.strip())
        cfg.paths.append(PathEntry(val.get("name", f"path{len(cfg.paths) + 1}"), nodes, start))
    elif section == "policy":
        try:
            policy = parse_policy(val["rule"])
            check_registry(cfg.policies + [policy])
            cfg.policies.append(policy)
        except QOverlayError as exc:
            raise ConfigError(str(exc), at["rule"]) from None
    else:
        types = {f.name: f.type for f in fields(QkdSessionParams)}
        for key, text in val.items():
            kind = float if types[key] in ("float", float) else int
            cfg.defaults[key] = _number(kind, text, at[key], key)


def parse_topology(text: str) -> TopologyConfig:
    cfg = TopologyConfig()
    section: str | None = None
    entries: dict[str, tuple[str, int]] = {}
    start = 0

    def close() -> None:
        if section is not None:
            _build(section, entries, start, cfg)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            close()
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            entries, start = {}, lineno
            continue
        if section is None:
            raise ConfigError("entry outside of any section", lineno)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in _KEYS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        entries[key] = (value, lineno)
    close()
    validate(cfg)
    return cfg


def load_topology(path: str | FsPath) -> TopologyConfig:
    try:
        text = FsPath(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read topology {path}: {exc.strerror}") from None
    return parse_topology(text)


def validate(cfg: TopologyConfig) -> None:
    """Check that every reference resolves."""
    seen: set[str] = set()
    for node in cfg.nodes:
        if node.name in seen:
            raise ConfigError(f"duplicate node {node.name!r}", node.line)
        seen.add(node.name)
    pairs: set[frozenset] = set()
    for link in cfg.links:
        for end in (link.a, link.b):
            if end not in seen:
                raise ConfigError(f"link refers to unknown node {end!r}", link.line)
        if link.a == link.b:
            raise ConfigError("link endpoints must differ", link.line)
        pair = frozenset((link.a, link.b))
        if pair in pairs:
            raise ConfigError(f"duplicate link {link.a}-{link.b}", link.line)
        pairs.add(pair)
        try:
            _quantum(link, 0)
            _classical(link, 0)
        except QOverlayError as exc:
            raise ConfigError(str(exc), link.line) from None
    names: set[str] = set()
    for path in cfg.paths:
        if path.name in names:
            raise ConfigError(f"duplicate path {path.name!r}", path.line)
        names.add(path.name)
        if len(path.nodes) < 2:
            raise ConfigError("a path needs at least two nodes", path.line)
        for node in path.nodes:
            if node not in seen:
                raise ConfigError(f"path refers to unknown node {node!r}", path.line)
        for a, b in zip(path.nodes, path.nodes[1:]):
            if frozenset((a, b)) not in pairs:
                raise ConfigError(f"path hop {a}-{b} has no link", path.line)
    try:
        QkdSessionParams(**cfg.defaults)
    except (QOverlayError, TypeError) as exc:
        raise ConfigError(f"[defaults]: {exc}") from None


def derive_seed(seed: int, *labels: int) -> int:
    """A 64-bit seed for one component, derived from the run seed."""
    return int(np.random.SeedSequence([seed, *labels]).generate_state(1, np.uint64)[0])


def _quantum(link: LinkEntry, seed: int) -> QuantumLinkParams:
    return QuantumLinkParams(link.loss, link.flip, link.eavesdropper, seed)


def _classical(link: LinkEntry, seed: int) -> ClassicalChannelParams:
    return ClassicalChannelParams(link.drop, link.latency, seed)


def build_controller(cfg: TopologyConfig, seed: int, parallel: bool = False,
                     drop: float | None = None) -> Controller:
    """Instantiate the topology. ``drop`` overrides every link's drop probability."""
    ctl = Controller(parallel=parallel)
    for node in cfg.nodes:
        ctl.add_node(node.name, trusted=node.trusted)
    for i, link in enumerate(cfg.links):
        if drop is not None:
            link = replace(link, drop=drop)
        base = link.seed if link.seed is not None else derive_seed(seed, i)
        quantum = _quantum(link, base)
        qkd = QkdSessionParams(**{**cfg.defaults, "seed": base})
        ctl.configure_link(LinkSpec((link.a, link.b), quantum, _classical(link, derive_seed(base, 1)),
                                    qkd, link.low_watermark))
    for policy in cfg.policies:
        ctl.add_policy(policy)
    return ctl
