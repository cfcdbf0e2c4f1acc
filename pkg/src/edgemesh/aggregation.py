"""Pipeline evaluation: predicates, tumbling windows, spatial fan-in, processors.

Values flowing through a pipeline start as the raw payload (``bytes``) and
become numbers or strings once a stage has interpreted them. Payloads are
either a UTF-8 scalar (``"27.5"``, ``"int_id"``) or a JSON object carrying a
``value`` field.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from .grammar import (
    FilterPredicate,
    ProcessingOp,
    SpatialAgg,
    SubscriptionExpr,
    TemporalSpec,
    TopicPath,
    is_number,
    matches,
)

WINDOW_MS = {
    "DAILY": 86_400_000,
    "HOURLY": 3_600_000,
    "QUARTERHOURLY": 900_000,
}

Value = Union[bytes, float, int, str]


class TypeMismatch(ValueError):
    pass


class UnknownCapability(KeyError):
    pass


@dataclass(frozen=True)
class Publication:
    topic: TopicPath
    payload: bytes
    ts: float
    origin_broker: str
    msg_id: str
    hop_brokers: frozenset[str] = frozenset()
    scope: str = "global"

    def __post_init__(self) -> None:
        if self.origin_broker not in self.hop_brokers:
            object.__setattr__(self, "hop_brokers", self.hop_brokers | {self.origin_broker})

    def with_hop(self, broker: str) -> "Publication":
        return Publication(
            self.topic, self.payload, self.ts, self.origin_broker, self.msg_id,
            self.hop_brokers | {broker}, self.scope,
        )


@dataclass(frozen=True, order=True)
class WindowId:
    kind: str
    index: int

    @property
    def start(self) -> int:
        return self.index * WINDOW_MS[self.kind]

    @property
    def end(self) -> int:
        return (self.index + 1) * WINDOW_MS[self.kind]


@dataclass(frozen=True)
class Emission:
    sub_id: Any
    value: Value
    window: WindowId | None
    ts: float
    topic: TopicPath | None = None


@dataclass
class Accumulator:
    count: int = 0
    sum: float = 0.0
    min: float = math.inf
    max: float = -math.inf

    def add(self, value: Any, numeric: bool) -> None:
        self.count += 1
        if numeric:
            self.sum += value
            self.min = min(self.min, value)
            self.max = max(self.max, value)

    def result(self, agg: str) -> float | int:
        if agg == "COUNT":
            return self.count
        if agg == "SUM":
            return self.sum
        if agg == "AVG":
            return self.sum / self.count
        return self.min if agg == "MIN" else self.max


@dataclass
class AggregationState:
    """Cached values for one subscription, owned by a single broker loop."""

    temporal: dict[WindowId, Accumulator] = field(default_factory=dict)
    spatial: dict[TopicPath, tuple[Any, float]] = field(default_factory=dict)
    last_closed: int | None = None
    type_mismatches: int = 0
    late: int = 0

    @property
    def open_window(self) -> WindowId | None:
        return next(iter(self.temporal), None)

    def to_json(self) -> str:
        return json.dumps(
            {
                "temporal": [
                    {"window": [w.kind, w.index], "count": a.count, "sum": a.sum,
                     "min": a.min if a.count else None, "max": a.max if a.count else None}
                    for w, a in self.temporal.items()
                ],
                "spatial": {
                    ("" if t is None else str(t)): {"value": _jsonable(v), "ts": ts}
                    for t, (v, ts) in sorted(self.spatial.items(), key=lambda kv: kv[0].levels if kv[0] else ())
                },
                "last_closed": self.last_closed,
                "type_mismatches": self.type_mismatches,
                "late": self.late,
            },
            sort_keys=True,
        )


def _jsonable(value: Value) -> Any:
    if isinstance(value, bytes):
        return base64.b64encode(value).decode("ascii")
    return value


# -- capabilities -----------------------------------------------------------


@dataclass(frozen=True)
class Capability:
    name: str
    cost: int
    description: str = ""
    processor: Callable[[bytes], Value] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.cost <= 0:
            raise ValueError("capability cost must be positive")


def count_people(payload: bytes) -> int:
    """Stub people counter: reads ``people`` from a JSON object."""
    try:
        doc = json.loads(payload)
    except (UnicodeDecodeError, ValueError) as exc:
        raise TypeMismatch("CNTPPL expects a JSON object") from exc
    if not isinstance(doc, dict) or isinstance(doc.get("people"), bool) or not isinstance(doc.get("people"), int):
        raise TypeMismatch("CNTPPL expects an integer 'people' field")
    return doc["people"]


def process_media(payload: bytes) -> int:
    """Stub media job: the payload size stands in for the processing result."""
    return len(payload)


BUILTIN_PROCESSORS: dict[str, tuple[Callable[[bytes], Value], str]] = {
    "CNTPPL": (count_people, "count people in an image"),
    "PROCESS": (process_media, "generic media processing (stub)"),
}


class CapabilityRegistry:
    def __init__(self, costs: dict[str, int] | None = None):
        self._caps: dict[str, Capability] = {}
        for name, cost in (costs or {}).items():
            self.register(name, cost)

    def register(
        self, name: str, cost: int, processor: Callable[[bytes], Value] | None = None,
        description: str | None = None,
    ) -> Capability:
        if processor is None:
            if name not in BUILTIN_PROCESSORS:
                raise UnknownCapability(name)
            processor, default_desc = BUILTIN_PROCESSORS[name]
            description = default_desc if description is None else description
        cap = Capability(name, int(cost), description or "", processor)
        self._caps[name] = cap
        return cap

    def unregister(self, name: str) -> None:
        self._caps.pop(name, None)

    def __contains__(self, name: object) -> bool:
        return name in self._caps

    def __getitem__(self, name: str) -> Capability:
        try:
            return self._caps[name]
        except KeyError:
            raise UnknownCapability(name) from None

    def names(self) -> list[str]:
        return sorted(self._caps)

    def capabilities(self) -> list[Capability]:
        return [self._caps[n] for n in self.names()]


def default_registry() -> CapabilityRegistry:
    return CapabilityRegistry({"CNTPPL": 10, "PROCESS": 25})


# -- stage primitives -------------------------------------------------------


def scalar_of(value: Value) -> float | str:
    """Interpret a pipeline value as a number if possible, else as text."""
    if isinstance(value, bool):
        raise TypeMismatch("boolean payload")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, bytes):
        try:
            text = value.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TypeMismatch("payload is not UTF-8") from exc
    else:
        text = value
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except ValueError:
            doc = None
        if isinstance(doc, dict) and "value" in doc:
            inner = doc["value"]
            if isinstance(inner, bool) or not isinstance(inner, (int, float, str)):
                raise TypeMismatch("'value' field must be a scalar")
            return scalar_of(inner)
    if is_number(stripped):
        return float(stripped)
    return text


def _numeric(value: Value) -> float:
    scalar = scalar_of(value)
    if isinstance(scalar, str):
        raise TypeMismatch(f"expected a number, got {scalar!r}")
    return scalar


def _text(scalar: float | str) -> str:
    if isinstance(scalar, float) and scalar.is_integer():
        return str(int(scalar))
    return str(scalar)


def eval_predicate(pred: FilterPredicate, payload: Value) -> bool:
    if pred.op in ("GT", "LT"):
        value = _numeric(payload)
        return value > pred.operand if pred.op == "GT" else value < pred.operand
    scalar = scalar_of(payload)
    if pred.op == "CONTAINS":
        return str(pred.operand) in _text(scalar)
    operand = pred.operand
    if isinstance(scalar, float) and is_number(str(operand)):
        equal = scalar == float(operand)
    else:
        equal = _text(scalar) == str(operand)
    return equal if pred.op == "EQ" else not equal


def window_of(ts: float, kind: str) -> WindowId:
    if ts < 0:
        raise ValueError("timestamps start at the simulation epoch")
    return WindowId(kind, int(ts // WINDOW_MS[kind]))


def apply_temporal(
    state: AggregationState, spec: TemporalSpec, value: Value, ts: float, sub_id: Any = None
) -> Emission | None:
    """Accumulate into the tumbling window of ``ts``; emit the previous window if it closed."""
    numeric = spec.agg != "COUNT"
    v = _numeric(value) if numeric else value
    win = window_of(ts, spec.window)
    emission = None
    current = state.open_window
    if current is not None and win.index < current.index or (
        current is None and state.last_closed is not None and win.index <= state.last_closed
    ):
        state.late += 1
        return None
    if current is not None and win.index > current.index:
        emission = _close(state, spec, current, sub_id)
    state.temporal.setdefault(win, Accumulator()).add(v, numeric)
    return emission


def close_windows(
    state: AggregationState, spec: TemporalSpec, now: float, grace: float = 0, sub_id: Any = None
) -> list[Emission]:
    """Clock-tick hook: close the open window once ``now`` passes its end plus ``grace``."""
    current = state.open_window
    if current is None or now < current.end + grace:
        return []
    return [_close(state, spec, current, sub_id)]


def _close(state: AggregationState, spec: TemporalSpec, win: WindowId, sub_id: Any) -> Emission:
    acc = state.temporal.pop(win)
    state.last_closed = win.index
    return Emission(sub_id, acc.result(spec.agg), win, float(win.end))


def apply_spatial(
    state: AggregationState, agg: SpatialAgg, topic: TopicPath, value: Value, ts: float = 0.0,
    sub_id: Any = None,
) -> Emission:
    v = value if agg.agg == "COUNT" else _numeric(value)
    state.spatial[topic] = (v, ts)
    values = [val for val, _ in state.spatial.values()]
    if agg.agg == "COUNT":
        result: float | int = len(values)
    elif agg.agg == "SUM":
        result = math.fsum(values)
    elif agg.agg == "AVG":
        result = math.fsum(values) / len(values)
    elif agg.agg == "MIN":
        result = min(values)
    else:
        result = max(values)
    return Emission(sub_id, result, None, ts, topic)


def apply_processing(registry: CapabilityRegistry, op: ProcessingOp, payload: Value) -> Value:
    cap = registry[op.name]
    if not isinstance(payload, bytes):
        payload = _text(scalar_of(payload)).encode("utf-8")
    return cap.processor(payload)


# -- pipelines --------------------------------------------------------------


@dataclass
class _Item:
    value: Value
    ts: float
    topic: TopicPath | None
    window: WindowId | None = None


def _run_stages(
    stages: tuple, start: int, items: list[_Item], state: AggregationState,
    registry: CapabilityRegistry, sub_id: Any,
) -> list[Emission]:
    for stage in stages[start:]:
        out: list[_Item] = []
        for item in items:
            if isinstance(stage, ProcessingOp):
                out.append(_Item(apply_processing(registry, stage, item.value), item.ts, item.topic, item.window))
            elif isinstance(stage, FilterPredicate):
                if eval_predicate(stage, item.value):
                    out.append(item)
            elif isinstance(stage, SpatialAgg):
                em = apply_spatial(state, stage, item.topic, item.value, item.ts, sub_id)
                out.append(_Item(em.value, em.ts, item.topic, item.window))
            else:
                em = apply_temporal(state, stage, item.value, item.ts, sub_id)
                if em is not None:
                    # a window aggregate is not tied to any single topic
                    out.append(_Item(em.value, em.ts, None, em.window))
        items = out
        if not items:
            return []
    return [Emission(sub_id, it.value, it.window, it.ts, it.topic) for it in items]


def eval_pipeline(
    expr: SubscriptionExpr, pub: Publication, state: AggregationState,
    registry: CapabilityRegistry | None = None, sub_id: Any = None,
) -> list[Emission]:
    """Run ``pub`` through the stages nearest-topic first.

    A payload a stage cannot interpret is dropped for this subscription and
    counted in ``state.type_mismatches``.
    """
    if not matches(expr.filter, pub.topic):
        return []
    registry = registry if registry is not None else default_registry()
    try:
        return _run_stages(
            expr.evaluation_order(), 0, [_Item(pub.payload, pub.ts, pub.topic)], state, registry, sub_id
        )
    except TypeMismatch:
        state.type_mismatches += 1
        return []


def tick_pipeline(
    expr: SubscriptionExpr, state: AggregationState, now: float, grace: float = 0,
    registry: CapabilityRegistry | None = None, sub_id: Any = None,
) -> list[Emission]:
    """Close an expired temporal window and feed its aggregate to the outer stages."""
    order = expr.evaluation_order()
    idx = next((i for i, s in enumerate(order) if isinstance(s, TemporalSpec)), None)
    if idx is None:
        return []
    closed = close_windows(state, order[idx], now, grace, sub_id)
    if not closed:
        return []
    items = [_Item(em.value, em.ts, None, em.window) for em in closed]
    try:
        return _run_stages(order, idx + 1, items, state, registry or default_registry(), sub_id)
    except TypeMismatch:
        state.type_mismatches += 1
        return []
