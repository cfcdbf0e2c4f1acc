"""Subscription language: topic paths, topic filters and operator chains.

An expression is a flat run of ``$``-prefixed operator stages followed by an
MQTT topic filter::

    $DAILYAVG$CNTPPL/camera_id
    $COUNT$EQ;int_id/+/location
    $GT;25/sensors/+/temp
    sensors/room1/temp

Stages are stored in textual (left-to-right) order and evaluated right to
left, so the stage nearest the topic runs first.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Iterable, Union

PREDICATE_OPS = ("GT", "LT", "EQ", "NEQ", "CONTAINS")
AGG_OPS = ("COUNT", "SUM", "AVG", "MIN", "MAX")
WINDOWS = ("DAILY", "HOURLY", "QUARTERHOURLY")
DEFAULT_CAPABILITIES = frozenset({"CNTPPL", "PROCESS"})
SYS_ROOT = "$SYS"

_IDENT = re.compile(r"[A-Za-z0-9_]+")
_NUMBER = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\Z")
_TEMPORAL = {w + a: (w, a) for w in WINDOWS for a in AGG_OPS}


class GrammarError(ValueError):
    """Base class for rejected expressions; ``position`` indexes the input."""

    def __init__(self, message: str, text: str = "", position: int = 0, length: int = 1):
        super().__init__(message)
        self.message = message
        self.text = text
        self.position = position
        self.length = max(1, length)

    def caret(self) -> str:
        return self.text + "\n" + " " * self.position + "^" * self.length


class SubscriptionSyntaxError(GrammarError):
    pass


class UnknownOperator(SubscriptionSyntaxError):
    """A ``$`` token that is neither a built-in operator nor a known capability."""

    def __init__(self, token: str, text: str = "", position: int = 0):
        super().__init__(f"unknown operator ${token}", text, position, len(token) + 1)
        self.token = token


class SemanticError(GrammarError):
    pass


class DegenerateSpatialWarning(UserWarning):
    """Spatial aggregation over a filter without wildcards."""


def is_number(text: str) -> bool:
    return bool(_NUMBER.match(text))


@dataclass(frozen=True)
class TopicPath:
    levels: tuple[str, ...]

    def __str__(self) -> str:
        return "/".join(self.levels)

    @property
    def is_sys(self) -> bool:
        return self.levels[0] == SYS_ROOT


@dataclass(frozen=True)
class TopicFilter:
    levels: tuple[str, ...]

    def __str__(self) -> str:
        return "/".join(self.levels)

    @property
    def has_wildcard(self) -> bool:
        return any(level in ("+", "#") for level in self.levels)


@dataclass(frozen=True)
class FilterPredicate:
    op: str
    operand: Union[float, str]

    def token(self) -> str:
        return f"{self.op};{_render_operand(self.operand)}"


@dataclass(frozen=True)
class TemporalSpec:
    window: str
    agg: str

    def token(self) -> str:
        return self.window + self.agg


@dataclass(frozen=True)
class SpatialAgg:
    agg: str

    def token(self) -> str:
        return self.agg


@dataclass(frozen=True)
class ProcessingOp:
    # cost lives in the broker's capability registry, not in the expression
    name: str

    def token(self) -> str:
        return self.name


Stage = Union[FilterPredicate, TemporalSpec, SpatialAgg, ProcessingOp]


@dataclass(frozen=True)
class SubscriptionExpr:
    stages: tuple[Stage, ...]
    filter: TopicFilter

    def evaluation_order(self) -> tuple[Stage, ...]:
        return tuple(reversed(self.stages))

    @property
    def temporal(self) -> TemporalSpec | None:
        return next((s for s in self.stages if isinstance(s, TemporalSpec)), None)

    @property
    def processing(self) -> tuple[ProcessingOp, ...]:
        return tuple(s for s in self.stages if isinstance(s, ProcessingOp))

    def __str__(self) -> str:
        return render_subscription(self)


def _render_operand(operand: Union[float, str]) -> str:
    if isinstance(operand, float):
        if operand.is_integer():
            return str(int(operand))
        return repr(operand)
    return operand


def _check_level(level: str, text: str, pos: int, *, wildcards: bool, first: bool) -> None:
    if level == "":
        raise SubscriptionSyntaxError("empty topic level", text, pos)
    if wildcards and level in ("+", "#"):
        return
    for ch in ("+", "#"):
        idx = level.find(ch)
        if idx >= 0:
            kind = "wildcard must occupy a whole level" if wildcards else "wildcard in topic"
            raise SubscriptionSyntaxError(kind, text, pos + idx)
    if level.startswith("$") and not (first and level == SYS_ROOT):
        raise SubscriptionSyntaxError("level may not start with '$'", text, pos, len(level))


def _split_levels(body: str, text: str, offset: int) -> list[tuple[str, int]]:
    # one trailing slash is tolerated and dropped
    if body.endswith("/") and len(body) > 1:
        body = body[:-1]
    out, pos = [], offset
    for level in body.split("/"):
        out.append((level, pos))
        pos += len(level) + 1
    return out


def _parse_filter_body(body: str, text: str, offset: int) -> TopicFilter:
    if body == "":
        raise SubscriptionSyntaxError("missing topic filter", text, offset)
    parts = _split_levels(body, text, offset)
    for i, (level, pos) in enumerate(parts):
        _check_level(level, text, pos, wildcards=True, first=i == 0)
        if level == "#" and i != len(parts) - 1:
            raise SubscriptionSyntaxError("'#' must be the last level", text, pos)
    return TopicFilter(tuple(level for level, _ in parts))


def parse_filter(text: str) -> TopicFilter:
    """Parse a plain MQTT topic filter (no operator stages)."""
    return _parse_filter_body(text, text, 0)


def parse_topic(text: str, *, allow_sys: bool = False) -> TopicPath:
    """Parse a publishable topic. ``$SYS/...`` requires ``allow_sys``."""
    if text == "":
        raise SubscriptionSyntaxError("empty topic", text, 0)
    parts = _split_levels(text, text, 0)
    for i, (level, pos) in enumerate(parts):
        _check_level(level, text, pos, wildcards=False, first=i == 0)
    path = TopicPath(tuple(level for level, _ in parts))
    if path.is_sys and not allow_sys:
        raise SubscriptionSyntaxError("$SYS topics are broker-only", text, 0, 4)
    return path


def parse_subscription(text: str, capabilities: Iterable[str] | None = None) -> SubscriptionExpr:
    """Parse an expression into stages plus a topic filter.

    ``capabilities`` is the set of processing operator names recognised
    (defaults to the stub processors). Any other ``$`` token raises
    :class:`UnknownOperator`.
    """
    if not isinstance(text, str) or text == "":
        raise SubscriptionSyntaxError("empty expression", text or "", 0)
    caps = DEFAULT_CAPABILITIES if capabilities is None else frozenset(capabilities)
    stages: list[Stage] = []
    pos = 0
    n = len(text)
    filter_start = 0
    while pos < n and text[pos] == "$":
        m = _IDENT.match(text, pos + 1)
        if m is None:
            raise SubscriptionSyntaxError("expected operator after '$'", text, pos)
        token = m.group(0)
        end = m.end()
        if token == "SYS":
            filter_start = pos
            break
        if token in PREDICATE_OPS:
            if end >= n or text[end] != ";":
                raise SubscriptionSyntaxError(f"${token} requires ';operand'", text, end)
            op_end = end + 1
            while op_end < n and text[op_end] not in "/$":
                op_end += 1
            raw = text[end + 1 : op_end]
            if raw == "":
                raise SubscriptionSyntaxError("empty operand", text, end)
            stages.append(FilterPredicate(token, _parse_operand(token, raw, text, end + 1)))
            end = op_end
        elif token in _TEMPORAL:
            stages.append(TemporalSpec(*_TEMPORAL[token]))
        elif token in AGG_OPS:
            stages.append(SpatialAgg(token))
        elif token in caps:
            stages.append(ProcessingOp(token))
        else:
            raise UnknownOperator(token, text, pos)
        if end >= n:
            raise SubscriptionSyntaxError("missing topic filter", text, end)
        if text[end] == "/":
            filter_start = end + 1
            pos = end + 1
            break
        if text[end] != "$":
            raise SubscriptionSyntaxError(f"unexpected {text[end]!r}", text, end)
        pos = end
    else:
        filter_start = pos
    flt = _parse_filter_body(text[filter_start:], text, filter_start)
    expr = SubscriptionExpr(tuple(stages), flt)
    _check_semantics(expr, text)
    return expr


def _parse_operand(op: str, raw: str, text: str, pos: int) -> Union[float, str]:
    if op in ("GT", "LT"):
        if not is_number(raw):
            raise SubscriptionSyntaxError(f"${op} operand must be numeric", text, pos, len(raw))
        value = float(raw)
        if not math.isfinite(value):
            raise SubscriptionSyntaxError("operand out of range", text, pos, len(raw))
        return value
    return raw


def _check_semantics(expr: SubscriptionExpr, text: str) -> None:
    temporal = [s for s in expr.stages if isinstance(s, TemporalSpec)]
    spatial = [s for s in expr.stages if isinstance(s, SpatialAgg)]
    if len(temporal) > 1:
        raise SemanticError("at most one temporal aggregation per expression", text, 0)
    if len(spatial) > 1:
        raise SemanticError("at most one spatial aggregation per expression", text, 0)
    if spatial and not expr.filter.has_wildcard:
        warnings.warn(
            f"spatial ${spatial[0].agg} over wildcard-free filter {expr.filter} "
            "degenerates to a per-message aggregate",
            DegenerateSpatialWarning,
            stacklevel=3,
        )


def render_subscription(expr: SubscriptionExpr) -> str:
    prefix = "".join("$" + stage.token() for stage in expr.stages)
    body = str(expr.filter)
    return f"{prefix}/{body}" if prefix else body


def matches(filter: TopicFilter, topic: TopicPath) -> bool:
    """MQTT matching: ``+`` is one level, a terminal ``#`` is zero or more.

    Wildcards in the first level never match ``$``-rooted topics.
    """
    flevels, tlevels = filter.levels, topic.levels
    if tlevels[0].startswith("$") and flevels[0] in ("+", "#"):
        return False
    for i, f in enumerate(flevels):
        if f == "#":
            return True
        if i >= len(tlevels):
            return False
        if f != "+" and f != tlevels[i]:
            return False
    return len(flevels) == len(tlevels)


def describe(expr: SubscriptionExpr) -> str:
    """One-line breakdown in evaluation order, e.g. ``CNTPPL → DAILY AVG, filter cam``."""
    parts = []
    for stage in expr.evaluation_order():
        if isinstance(stage, FilterPredicate):
            parts.append(f"predicate {stage.op} {_render_operand(stage.operand)}")
        elif isinstance(stage, TemporalSpec):
            parts.append(f"{stage.window} {stage.agg}")
        elif isinstance(stage, SpatialAgg):
            parts.append(f"spatial {stage.agg}")
        else:
            parts.append(stage.name)
    head = " → ".join(parts)
    return f"{head}, filter {expr.filter}" if head else f"filter {expr.filter}"
