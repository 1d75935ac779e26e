"""Link, path and policy control."""

from .controller import Controller, LinkSpec, PathSpec
from .paths import Path, PathEnd, Relay, RelayRecord
from .policy import (
    ActionRecord,
    Condition,
    Policy,
    evaluate_policies,
    parse_policies,
    parse_policy,
)

__all__ = [
    "ActionRecord", "Condition", "Controller", "LinkSpec", "Path", "PathEnd", "PathSpec",
    "Policy", "Relay", "RelayRecord", "evaluate_policies", "parse_policies", "parse_policy",
]
