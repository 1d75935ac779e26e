"""Declarative condition/action policies.

One policy per line::

    when <field> <op> <value> [and <field> <op> <value> ...] then <action> priority <n>

``field`` is ``kind``, ``severity`` (or ``sev``), ``scope``, an event
attribute name, or ``link.<stat>`` for a statistic of the event's link
(``pool_bytes``, ``qber``, ``sessions``, ``down``). ``op`` is one of
``== != < <= > >=``. Severities compare by rank (info < warning < critical).
``action`` is ``trigger_qkd_session``, ``refresh_circuit_keys``,
``mark_link_down``, ``raise_alert`` or ``set_param(<name>, <value>)``.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from ..errors import InvalidInput, PolicySyntaxError
from ..management import Event

ACTIONS = ("trigger_qkd_session", "refresh_circuit_keys", "mark_link_down", "raise_alert", "set_param")
OPS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq, "!=": operator.ne, "<": operator.lt,
    "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}
SEVERITY_RANK = {"info": 0, "warning": 1, "critical": 2}

_LINE = re.compile(r"^\s*when\s+(?P<cond>.+?)\s+then\s+(?P<action>.+?)\s+priority\s+(?P<prio>-?\d+)\s*$")
_COND = re.compile(r"^\s*(?P<field>[A-Za-z_][\w.]*)\s*(?P<op>==|!=|<=|>=|<|>)\s*(?P<value>\S+)\s*$")
_ACTION = re.compile(r"^(?P<name>[a-z_]+)\s*(?:\(\s*(?P<args>[^)]*)\))?$")


def parse_value(text: str) -> Any:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in OPS:
            raise PolicySyntaxError(f"unknown operator {self.op!r}")

    def resolve(self, event: Event, stats: Mapping[str, Any]) -> Any:
        f = self.field
        if f == "kind":
            return event.kind.value
        if f in ("severity", "sev"):
            return event.severity.value
        if f == "scope":
            return event.scope
        if f == "tick":
            return event.tick
        if f.startswith("link."):
            return stats.get(f[5:])
        return event.attributes.get(f)

    def holds(self, event: Event, stats: Mapping[str, Any] | None = None) -> bool:
        actual = self.resolve(event, stats or {})
        if actual is None:
            return False
        expected = self.value
        if self.field in ("severity", "sev"):
            actual, expected = SEVERITY_RANK.get(actual), SEVERITY_RANK.get(str(expected))
            if expected is None:
                return False
        numeric = (isinstance(actual, (int, float)) and not isinstance(actual, bool)
                   and isinstance(expected, (int, float)) and not isinstance(expected, bool))
        if not numeric and self.op not in ("==", "!="):
            return False
        if not numeric:
            actual, expected = str(actual), str(expected)
        return OPS[self.op](actual, expected)


@dataclass(frozen=True)
class Policy:
    name: str
    conditions: tuple[Condition, ...]
    action: str
    args: tuple = ()
    priority: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise PolicySyntaxError(f"unknown action {self.action!r}")
        if self.action == "set_param" and len(self.args) != 2:
            raise PolicySyntaxError("set_param takes (name, value)")
        if self.action != "set_param" and self.args:
            raise PolicySyntaxError(f"{self.action} takes no arguments")

    def matches(self, event: Event, stats: Mapping[str, Any] | None = None) -> bool:
        return all(c.holds(event, stats) for c in self.conditions)


def parse_policy(text: str, name: str | None = None) -> Policy:
    m = _LINE.match(text)
    if not m:
        raise PolicySyntaxError(f"expected 'when ... then ... priority N': {text.strip()!r}")
    conds = []
    for part in re.split(r"\s+and\s+", m["cond"]):
        cm = _COND.match(part)
        if not cm:
            raise PolicySyntaxError(f"bad condition {part.strip()!r}")
        conds.append(Condition(cm["field"], cm["op"], parse_value(cm["value"])))
    am = _ACTION.match(m["action"].strip())
    if not am:
        raise PolicySyntaxError(f"bad action {m['action']!r}")
    args: tuple = ()
    if am["args"] is not None:
        args = tuple(parse_value(a) for a in am["args"].split(",") if a.strip())
    return Policy(name or f"policy@{m['prio']}", tuple(conds), am["name"], args, int(m["prio"]))


def parse_policies(text: str) -> list[Policy]:
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            try:
                out.append(parse_policy(stripped, name=f"line{i}"))
            except PolicySyntaxError as exc:
                raise PolicySyntaxError(f"line {i}: {exc}") from None
    return out


@dataclass(frozen=True)
class ActionRecord:
    tick: int
    policy: str
    priority: int
    action: str
    target: str
    ok: bool
    detail: str = ""

    def to_line(self) -> str:
        return (f"tick={self.tick} policy={self.policy} priority={self.priority} action={self.action} "
                f"target={self.target} ok={'true' if self.ok else 'false'}"
                + (f" detail={self.detail.replace(' ', '_')}" if self.detail else ""))


def check_registry(registry: Iterable[Policy]) -> list[Policy]:
    policies = list(registry)
    prios = [p.priority for p in policies]
    if len(set(prios)) != len(prios):
        raise InvalidInput("policy priorities must be distinct")
    return sorted(policies, key=lambda p: p.priority)


def evaluate_policies(
    event: Event,
    registry: Iterable[Policy],
    execute: Callable[[Policy, Event], str],
    stats: Mapping[str, Any] | None = None,
    target_of: Callable[[Policy, Event], str] | None = None,
) -> list[ActionRecord]:
    """Fire every matching policy in ascending priority order.

    ``execute`` performs an action and returns a detail string; an exception
    it raises is recorded as a failed action and evaluation continues. Each
    distinct (action, arguments, target) runs at most once per evaluation.
    """
    done: set = set()
    records = []
    target_of = target_of or (lambda p, e: e.scope)
    for policy in check_registry(registry):
        if not policy.matches(event, stats):
            continue
        target = target_of(policy, event)
        key = (policy.action, policy.args, target)
        if key in done:
            continue
        done.add(key)
        try:
            detail = execute(policy, event) or ""
            ok = True
        except Exception as exc:  # fail-open: report and continue
            detail, ok = f"{type(exc).__name__}: {exc}", False
        records.append(ActionRecord(event.tick, policy.name, policy.priority, policy.action,
                                    target, ok, detail))
    return records
