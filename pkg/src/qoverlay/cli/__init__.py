"""Command-line scenario runner."""

from .config import (
    LinkEntry,
    NodeEntry,
    PathEntry,
    TopologyConfig,
    build_controller,
    default_topology,
    load_topology,
    parse_topology,
)
from .main import build_parser, main

__all__ = [
    "LinkEntry", "NodeEntry", "PathEntry", "TopologyConfig", "build_controller", "build_parser",
    "default_topology", "load_topology", "main", "parse_topology",
]
