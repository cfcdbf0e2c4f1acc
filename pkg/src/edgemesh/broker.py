"""Single broker: sessions, subscription table, fan-out, QoS 0/1, admission.

The broker is a passive state machine. All I/O and timers go through a
:class:`Host`, which is the simulator in scenario runs, an asyncio loop in
service mode, or :class:`ManualHost` in unit tests.
"""

from __future__ import annotations

import base64
import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .aggregation import (
    AggregationState,
    Capability,
    CapabilityRegistry,
    Emission,
    Publication,
    default_registry,
    eval_pipeline,
    tick_pipeline,
)
from .grammar import (
    SYS_ROOT,
    GrammarError,
    SubscriptionExpr,
    TopicFilter,
    TopicPath,
    UnknownOperator,
    parse_subscription,
    parse_topic,
)

MALFORMED = "MALFORMED"
UNKNOWN_CAPABILITY = "UNKNOWN_CAPABILITY"
OVER_BUDGET = "OVER_BUDGET"
NOT_CONNECTED = "NOT_CONNECTED"

CAPABILITY_PREFIX = (SYS_ROOT, "capabilities")


class InvalidTopic(ValueError):
    pass


class ReservedTopic(InvalidTopic):
    pass


class Host(Protocol):
    def now(self) -> float: ...

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Any: ...

    def to_client(self, client_id: str, frame: dict) -> None: ...

    def to_peer(self, peer: str, msg: Any) -> None: ...

    def to_coordinator(self, update: dict) -> None: ...


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class ManualHost:
    """Hand-cranked host for driving a broker without a simulator."""

    def __init__(self) -> None:
        self.time = 0.0
        self._timers: list = []
        self._seq = 0
        self.client_frames: list[tuple[str, dict]] = []
        self.peer_messages: list[tuple[str, Any]] = []
        self.control: list[dict] = []

    def now(self) -> float:
        return self.time

    def call_later(self, delay: float, fn: Callable, *args: Any) -> _Timer:
        handle = _Timer()
        self._seq += 1
        heapq.heappush(self._timers, (self.time + delay, self._seq, handle, fn, args))
        return handle

    def to_client(self, client_id: str, frame: dict) -> None:
        self.client_frames.append((client_id, frame))

    def to_peer(self, peer: str, msg: Any) -> None:
        self.peer_messages.append((peer, msg))

    def to_coordinator(self, update: dict) -> None:
        self.control.append(update)

    def advance(self, until: float) -> None:
        while self._timers and self._timers[0][0] <= until:
            t, _, handle, fn, args = heapq.heappop(self._timers)
            self.time = t
            if not handle.cancelled:
                fn(*args)
        self.time = max(self.time, until)

    def frames_for(self, client_id: str, kind: str | None = None) -> list[dict]:
        return [f for c, f in self.client_frames if c == client_id and (kind is None or f["t"] == kind)]


class TopicTrie:
    """Filter index: look up every stored key whose filter matches a topic."""

    def __init__(self) -> None:
        self._root: dict = {}

    def insert(self, flt: TopicFilter, key: Any) -> None:
        node = self._root
        for level in flt.levels:
            node = node.setdefault(level, {})
        node.setdefault(None, set()).add(key)

    def remove(self, flt: TopicFilter, key: Any) -> None:
        path = [self._root]
        for level in flt.levels:
            nxt = path[-1].get(level)
            if nxt is None:
                return
            path.append(nxt)
        keys = path[-1].get(None)
        if keys is None:
            return
        keys.discard(key)
        if not keys:
            del path[-1][None]
        for level, parent, child in zip(reversed(flt.levels), reversed(path[:-1]), reversed(path[1:])):
            if child:
                break
            del parent[level]

    def match(self, topic: TopicPath) -> set:
        out: set = set()
        levels = topic.levels
        sys_topic = levels[0].startswith("$")

        def walk(node: dict, i: int) -> None:
            wild_ok = not (i == 0 and sys_topic)
            if wild_ok and "#" in node:
                out.update(node["#"].get(None, ()))
            if i == len(levels):
                out.update(node.get(None, ()))
                return
            if levels[i] in node:
                walk(node[levels[i]], i + 1)
            if wild_ok and "+" in node:
                walk(node["+"], i + 1)

        walk(self._root, 0)
        return out


@dataclass
class Subscription:
    sub_id: Any
    client_id: str
    text: str
    expr: SubscriptionExpr
    qos: int
    scope: str
    cost: int
    state: AggregationState = field(default_factory=AggregationState)

    @property
    def key(self) -> tuple:
        return (self.client_id, self.sub_id)

    @property
    def federated(self) -> bool:
        return self.scope == "global" and self.expr.filter.levels[0] != SYS_ROOT


@dataclass
class Pending:
    frame: dict
    timer: Any
    attempts: int = 1


@dataclass
class Session:
    client_id: str
    conn_id: Any = None
    connected: bool = True
    subscriptions: dict[Any, Subscription] = field(default_factory=dict)
    pending: dict[str, Pending] = field(default_factory=dict)
    next_sub_id: int = 1


@dataclass(frozen=True)
class SubAck:
    sub_id: Any
    ok: bool
    reason: str | None = None
    hint: str | None = None

    def frame(self) -> dict:
        out = {"t": "SUBACK", "id": self.sub_id, "ok": self.ok, "reason": self.reason}
        if self.hint is not None:
            out["hint"] = self.hint
        return out


@dataclass(frozen=True)
class PubResult:
    msg_id: str
    deliveries: int


def encode_value(value: Any) -> dict:
    if isinstance(value, bytes):
        return {"value": base64.b64encode(value).decode("ascii"), "enc": "b64"}
    return {"value": value}


def decode_value(frame: dict) -> Any:
    if frame.get("enc") == "b64":
        return base64.b64decode(frame["value"])
    return frame["value"]


class BrokerNode:
    def __init__(
        self,
        broker_id: str,
        *,
        registry: CapabilityRegistry | None = None,
        budget: int = 100,
        retry_timeout: float = 2000,
        window_grace: float = 0,
        host: Host | None = None,
        strategy: Any = None,
    ):
        self.broker_id = broker_id
        self.registry = registry if registry is not None else default_registry()
        self.budget = budget
        self.used = 0
        self.retry_timeout = retry_timeout
        self.window_grace = window_grace
        self.host: Host = host if host is not None else ManualHost()
        self.sessions: dict[str, Session] = {}
        self.metrics: Counter = Counter()
        self.evaluation_log: list[str] = []
        self.qos1_emitted: list[tuple[str, str]] = []
        self.peer_free_budget: Callable[[], dict[str, int]] | None = None
        self._seen: set[str] = set()
        self._trie = TopicTrie()
        self._msg_seq = 0
        self._emit_seq = 0
        self._armed: dict[Any, int] = {}
        self.strategy = None
        if strategy is not None:
            self.attach_strategy(strategy)

    def attach_strategy(self, strategy: Any) -> None:
        self.strategy = strategy
        strategy.bind(self)

    # -- capabilities ------------------------------------------------------

    def start(self) -> None:
        self.publish_capabilities()

    def capabilities(self) -> list[Capability]:
        return self.registry.capabilities()

    def _capability_pub(self, cap: Capability) -> Publication:
        payload = json.dumps({"name": cap.name, "cost": cap.cost, "description": cap.description}, sort_keys=True)
        return self._new_publication(TopicPath(CAPABILITY_PREFIX + (cap.name,)), payload.encode(), "local")

    def publish_capabilities(self) -> list[Publication]:
        pubs = [self._capability_pub(cap) for cap in self.capabilities()]
        for pub in pubs:
            self.metrics["capability_publications"] += 1
            self.evaluate(pub)
        return pubs

    def register_capability(self, name: str, cost: int, processor: Callable | None = None) -> None:
        self.registry.register(name, cost, processor)
        self.publish_capabilities()

    def unregister_capability(self, name: str) -> None:
        self.registry.unregister(name)
        self.publish_capabilities()

    # -- sessions ----------------------------------------------------------

    def connect(self, client_id: str, conn_id: Any = None) -> Session:
        if not client_id:
            raise ValueError("client id must be non-empty")
        old = self.sessions.get(client_id)
        if old is not None and conn_id is not None and old.conn_id == conn_id and old.connected:
            return old
        if old is not None:
            self.disconnect(client_id, reason="takeover")
        session = Session(client_id, conn_id)
        self.sessions[client_id] = session
        self.metrics["connects"] += 1
        return session

    def disconnect(self, client_id: str, reason: str = "client") -> None:
        session = self.sessions.pop(client_id, None)
        if session is None:
            return
        session.connected = False
        for sub_id in list(session.subscriptions):
            self._remove_subscription(session, sub_id)
        for pending in session.pending.values():
            pending.timer.cancel()
        if reason == "handover":
            self.metrics["handover_loss"] += len(session.pending)
        session.pending.clear()
        self.metrics["disconnects"] += 1

    # -- subscriptions -----------------------------------------------------

    def subscribe(
        self, client_id: str, expr_text: str, qos: int = 0, sub_id: Any = None, scope: str = "global"
    ) -> SubAck:
        session = self.sessions.get(client_id)
        if session is None:
            return SubAck(sub_id, False, NOT_CONNECTED)
        if sub_id is None:
            while session.next_sub_id in session.subscriptions:
                session.next_sub_id += 1
            sub_id = session.next_sub_id
            session.next_sub_id += 1
        existing = session.subscriptions.get(sub_id)
        if existing is not None and existing.text == expr_text and existing.qos == qos and existing.scope == scope:
            return SubAck(sub_id, True)
        try:
            expr = parse_subscription(expr_text, self.registry.names())
        except UnknownOperator:
            return self._reject(sub_id, UNKNOWN_CAPABILITY)
        except GrammarError:
            return self._reject(sub_id, MALFORMED)
        if qos not in (0, 1) or scope not in ("local", "global"):
            return self._reject(sub_id, MALFORMED)
        if existing is not None:
            self._remove_subscription(session, sub_id)
        cost = sum(self.registry[op.name].cost for op in expr.processing)
        if self.used + cost > self.budget:
            return self._reject(sub_id, OVER_BUDGET, self._hint(cost))
        self.used += cost
        if expr.filter.levels[0] == SYS_ROOT:
            scope = "local"
        sub = Subscription(sub_id, client_id, expr_text, expr, qos, scope, cost)
        session.subscriptions[sub_id] = sub
        self._trie.insert(expr.filter, sub.key)
        self.metrics["subscriptions_granted"] += 1
        if sub.federated and self.strategy is not None:
            self.strategy.on_subscribe(sub)
        if expr.filter.levels[0] == SYS_ROOT:
            self._replay_capabilities(sub)
        return SubAck(sub_id, True)

    def _reject(self, sub_id: Any, reason: str, hint: str | None = None) -> SubAck:
        self.metrics["admission_rejections"] += 1
        self.metrics["rejected_" + reason.lower()] += 1
        return SubAck(sub_id, False, reason, hint)

    def _hint(self, cost: int) -> str | None:
        if self.peer_free_budget is None:
            return None
        free = {p: f for p, f in self.peer_free_budget().items() if p != self.broker_id and f >= cost}
        if not free:
            return None
        return min(free, key=lambda p: (-free[p], p))

    def _replay_capabilities(self, sub: Subscription) -> None:
        session = self.sessions[sub.client_id]
        for cap in self.capabilities():
            pub = self._capability_pub(cap)
            for em in eval_pipeline(sub.expr, pub, sub.state, self.registry, sub.sub_id):
                self._send_emission(session, sub, em)

    def unsubscribe(self, client_id: str, sub_id: Any) -> bool:
        session = self.sessions.get(client_id)
        if session is None or sub_id not in session.subscriptions:
            return False
        self._remove_subscription(session, sub_id)
        return True

    def _remove_subscription(self, session: Session, sub_id: Any) -> None:
        sub = session.subscriptions.pop(sub_id)
        self.used -= sub.cost
        self._trie.remove(sub.expr.filter, sub.key)
        self._armed.pop(sub.key, None)
        if sub.federated and self.strategy is not None:
            self.strategy.on_unsubscribe(sub)

    def active_cost(self) -> int:
        return sum(s.cost for sess in self.sessions.values() for s in sess.subscriptions.values())

    # -- publishing --------------------------------------------------------

    def _new_publication(self, topic: TopicPath, payload: bytes, scope: str) -> Publication:
        self._msg_seq += 1
        return Publication(
            topic, payload, self.host.now(), self.broker_id, f"{self.broker_id}:{self._msg_seq}",
            frozenset({self.broker_id}), scope,
        )

    def publish(
        self, client_id: str, topic_text: str, payload: bytes, qos: int = 0, scope: str = "global"
    ) -> PubResult:
        try:
            topic = parse_topic(topic_text, allow_sys=True)
        except GrammarError as exc:
            self.metrics["rejected_publications"] += 1
            raise InvalidTopic(str(exc)) from exc
        if topic.is_sys:
            self.metrics["rejected_publications"] += 1
            raise ReservedTopic(topic_text)
        if scope not in ("local", "global"):
            raise ValueError(f"unknown scope {scope!r}")
        pub = self._new_publication(topic, bytes(payload), scope)
        self.metrics["publications"] += 1
        deliveries = self.evaluate(pub)
        if scope == "global" and self.strategy is not None:
            self.strategy.on_publish(pub)
        return PubResult(pub.msg_id, deliveries)

    def has_evaluated(self, msg_id: str) -> bool:
        return msg_id in self._seen

    def evaluate(self, pub: Publication) -> int:
        """Match ``pub`` against the local table; each msg_id is processed at most once."""
        if pub.msg_id in self._seen:
            self.metrics["duplicate_arrivals"] += 1
            return 0
        self._seen.add(pub.msg_id)
        self.evaluation_log.append(pub.msg_id)
        delivered = 0
        for client_id, sub_id in sorted(self._trie.match(pub.topic), key=repr):
            session = self.sessions.get(client_id)
            sub = session.subscriptions.get(sub_id) if session else None
            if sub is None:
                continue
            if sub.scope == "local" and pub.origin_broker != self.broker_id:
                continue
            if pub.scope == "local" and sub.scope != "local":
                continue
            if sub.federated and self.strategy is not None and not self.strategy.runs_pipeline_locally(sub):
                continue
            emissions = eval_pipeline(sub.expr, pub, sub.state, self.registry, sub.sub_id)
            for em in emissions:
                self._send_emission(session, sub, em)
            delivered += len(emissions)
            self.arm_window(sub.key, sub.expr, sub.state,
                            lambda ems, k=sub.key: self._deliver_all(k, ems), self._sub_alive(sub))
        return delivered

    def _sub_alive(self, sub: Subscription) -> Callable[[], bool]:
        def alive() -> bool:
            session = self.sessions.get(sub.client_id)
            return session is not None and session.subscriptions.get(sub.sub_id) is sub
        return alive

    def _deliver_all(self, key: tuple, emissions: list[Emission]) -> None:
        for em in emissions:
            self.deliver(key[0], key[1], em)

    def arm_window(
        self, key: Any, expr: SubscriptionExpr, state: AggregationState,
        sink: Callable[[list[Emission]], None], alive: Callable[[], bool],
    ) -> None:
        """Schedule the tick that closes the open temporal window, once per window."""
        win = state.open_window
        if win is None or self._armed.get(key) == win.index:
            return
        self._armed[key] = win.index
        delay = max(0.0, win.end + self.window_grace - self.host.now())

        def fire() -> None:
            if not alive():
                return
            sink(tick_pipeline(expr, state, self.host.now(), self.window_grace, self.registry, key[-1]))

        self.host.call_later(delay, fire)

    def forget_window(self, key: Any) -> None:
        self._armed.pop(key, None)

    # -- delivery ----------------------------------------------------------

    def deliver(self, client_id: str, sub_id: Any, emission: Emission) -> bool:
        session = self.sessions.get(client_id)
        sub = session.subscriptions.get(sub_id) if session else None
        if sub is None:
            self.metrics["undeliverable"] += 1
            return False
        self._send_emission(session, sub, emission)
        return True

    def _send_emission(self, session: Session, sub: Subscription, em: Emission) -> None:
        frame = {
            "t": "EMIT",
            "sub": sub.sub_id,
            **encode_value(em.value),
            "window": [em.window.kind, em.window.index] if em.window else None,
            "ts": em.ts,
            "topic": str(em.topic) if em.topic is not None else None,
            "qos": sub.qos,
        }
        self.metrics["emissions"] += 1
        if sub.qos == 1:
            self._emit_seq += 1
            mid = f"{self.broker_id}/e{self._emit_seq}"
            frame["mid"] = mid
            self.qos1_emitted.append((session.client_id, mid))
            timer = self.host.call_later(self.retry_timeout, self._retransmit, session.client_id, mid)
            session.pending[mid] = Pending(frame, timer)
        self.host.to_client(session.client_id, frame)

    def _retransmit(self, client_id: str, mid: str) -> None:
        session = self.sessions.get(client_id)
        if session is None or mid not in session.pending:
            return
        pending = session.pending[mid]
        pending.attempts += 1
        pending.frame = {**pending.frame, "dup": True}
        pending.timer = self.host.call_later(self.retry_timeout, self._retransmit, client_id, mid)
        self.metrics["retransmissions"] += 1
        self.host.to_client(client_id, pending.frame)

    def ack(self, client_id: str, mid: str) -> bool:
        session = self.sessions.get(client_id)
        if session is None:
            return False
        pending = session.pending.pop(mid, None)
        if pending is None:
            self.metrics["stale_acks"] += 1
            return False
        pending.timer.cancel()
        return True

    # -- federation --------------------------------------------------------

    def receive(self, msg: Any, from_peer: str | None) -> None:
        self.strategy.receive(msg, from_peer)

    def control(self, update: dict) -> None:
        self.strategy.on_control(update)

    # -- wire --------------------------------------------------------------

    def handle_frame(self, client_id: str, frame: dict) -> None:
        """Dispatch one JSON frame from ``client_id``; replies go through the host."""
        kind = frame.get("t")
        if kind == "CONNECT":
            self.connect(client_id, frame.get("conn"))
            self.host.to_client(client_id, {"t": "CONNACK", "conn": frame.get("conn")})
            return
        if kind == "DISCONNECT":
            self.disconnect(client_id)
            return
        if client_id not in self.sessions:
            self.host.to_client(client_id, {"t": "ERROR", "reason": NOT_CONNECTED, "ref": kind})
            return
        if kind == "SUBSCRIBE":
            ack = self.subscribe(client_id, frame["expr"], int(frame.get("qos", 0)), frame.get("id"),
                                 frame.get("scope", "global"))
            self.host.to_client(client_id, ack.frame())
        elif kind == "UNSUBSCRIBE":
            self.unsubscribe(client_id, frame["id"])
            self.host.to_client(client_id, {"t": "UNSUBACK", "id": frame["id"]})
        elif kind == "PUBLISH":
            qos = int(frame.get("qos", 0))
            if frame.get("dup"):
                self.metrics["duplicate_publishes"] += 1
            try:
                self.publish(client_id, frame["topic"], base64.b64decode(frame.get("payload", "")), qos,
                             frame.get("scope", "global"))
            except InvalidTopic as exc:
                self.host.to_client(client_id, {"t": "ERROR", "reason": type(exc).__name__, "mid": frame.get("mid")})
                return
            if qos == 1:
                self.host.to_client(client_id, {"t": "PUBACK", "mid": frame.get("mid")})
        elif kind == "PUBACK":
            self.ack(client_id, frame["mid"])
        else:
            self.host.to_client(client_id, {"t": "ERROR", "reason": "UNKNOWN_FRAME", "ref": kind})


FRAME_TYPES = frozenset({
    "CONNECT", "CONNACK", "DISCONNECT", "SUBSCRIBE", "SUBACK", "UNSUBSCRIBE", "UNSUBACK",
    "PUBLISH", "PUBACK", "EMIT", "ERROR",
})


def encode_frame(frame: dict) -> bytes:
    """One JSON object per line, as used on the wire in both service and simulation."""
    if frame.get("t") not in FRAME_TYPES:
        raise ValueError(f"unknown frame type {frame.get('t')!r}")
    return json.dumps(frame, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_frame(line: bytes | str) -> dict:
    frame = json.loads(line)
    if not isinstance(frame, dict) or frame.get("t") not in FRAME_TYPES:
        raise ValueError(f"not a frame: {line!r}")
    return frame
