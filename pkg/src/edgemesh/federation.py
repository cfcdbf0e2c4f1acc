"""Inter-broker distribution: bridging, rendezvous routing and ICN delivery trees.

Each broker owns one strategy instance. Strategies never touch another
broker's state; everything crosses the overlay as a :class:`FederatedMessage`
handed to the broker's host.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

import numpy as np

from .aggregation import AggregationState, Emission, Publication, eval_pipeline
from .grammar import SubscriptionExpr, TopicFilter, TopicPath, matches, parse_filter, parse_subscription

if TYPE_CHECKING:
    from .broker import BrokerNode, Subscription

BROADCAST = "*BROADCAST*"
STRATEGIES = ("bridge", "rendezvous", "icn")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class UnreachableRN(RuntimeError):
    pass


class EmptySubscriberSet(LookupError):
    pass


# -- topology ---------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    a: str
    b: str
    latency: float
    kind: str = "X2"

    @property
    def key(self) -> tuple[str, str]:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)


class Topology:
    """Weighted, undirected broker overlay with deterministic shortest paths."""

    def __init__(self, brokers: Iterable[str], links: Iterable[Edge | tuple] = ()):
        self.brokers: tuple[str, ...] = tuple(sorted(set(brokers)))
        self._adj: dict[str, dict[str, float]] = {b: {} for b in self.brokers}
        self.links: dict[tuple[str, str], Edge] = {}
        for link in links:
            edge = link if isinstance(link, Edge) else Edge(*link)
            if edge.a not in self._adj or edge.b not in self._adj:
                raise ValueError(f"link {edge.a}-{edge.b} references an unknown broker")
            if edge.a == edge.b:
                raise ValueError("self-loop links are not allowed")
            if not edge.latency > 0:
                raise ValueError(f"link {edge.a}-{edge.b} latency must be positive")
            self.links[edge.key] = edge
            self._adj[edge.a][edge.b] = edge.latency
            self._adj[edge.b][edge.a] = edge.latency
        self._spt: dict[str, tuple[dict[str, float], dict[str, str]]] = {}

    def neighbors(self, broker: str) -> list[str]:
        return sorted(self._adj[broker])

    def latency(self, a: str, b: str) -> float:
        return self._adj[a][b]

    def shortest_paths(self, src: str) -> tuple[dict[str, float], dict[str, str]]:
        if src not in self._spt:
            dist = {src: 0.0}
            pred: dict[str, str] = {}
            done: set[str] = set()
            heap = [(0.0, src)]
            while heap:
                d, u = heapq.heappop(heap)
                if u in done:
                    continue
                done.add(u)
                for v in sorted(self._adj[u]):
                    nd = d + self._adj[u][v]
                    if v not in dist or nd < dist[v]:
                        dist[v] = nd
                        pred[v] = u
                        heapq.heappush(heap, (nd, v))
            self._spt[src] = (dist, pred)
        return self._spt[src]

    def path(self, src: str, dst: str) -> list[str]:
        dist, pred = self.shortest_paths(src)
        if dst not in dist:
            raise UnreachableRN(f"no path from {src} to {dst}")
        out = [dst]
        while out[-1] != src:
            out.append(pred[out[-1]])
        return out[::-1]

    def distance(self, src: str, dst: str) -> float:
        return self.shortest_paths(src)[0].get(dst, math.inf)

    def distance_matrix(self) -> np.ndarray:
        n = len(self.brokers)
        out = np.full((n, n), np.inf)
        for i, src in enumerate(self.brokers):
            dist = self.shortest_paths(src)[0]
            for j, dst in enumerate(self.brokers):
                if dst in dist:
                    out[i, j] = dist[dst]
        return out

    def is_connected(self) -> bool:
        if not self.brokers:
            return True
        return len(self.shortest_paths(self.brokers[0])[0]) == len(self.brokers)


# -- rendezvous mapping -----------------------------------------------------


def fnv1a64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class RendezvousRing:
    rn_set: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.rn_set:
            raise ValueError("rendezvous ring needs at least one node")
        object.__setattr__(self, "rn_set", tuple(self.rn_set))

    @property
    def designated(self) -> str:
        """RN that hosts pipelines for filters with a wildcard first level."""
        return min(self.rn_set)


def rn_for_topic(ring: RendezvousRing, topic: TopicPath | TopicFilter | str) -> str:
    """Owning rendezvous node, or :data:`BROADCAST` for wildcard-first filters."""
    if isinstance(topic, str):
        topic = parse_filter(topic)
    first = topic.levels[0]
    if first in ("+", "#"):
        return BROADCAST
    return ring.rn_set[fnv1a64(first) % len(ring.rn_set)]


def placement_cost(topology: Topology, rn_set: Sequence[str], weights: Mapping[str, float] | None = None) -> float:
    """Demand-weighted latency from every broker to its nearest RN."""
    dmat = topology.distance_matrix()
    idx = [topology.brokers.index(r) for r in rn_set]
    w = _weights(topology, weights)
    return float(np.sum(w * dmat[:, idx].min(axis=1)))


def _weights(topology: Topology, weights: Mapping[str, float] | None) -> np.ndarray:
    if weights is None:
        return np.ones(len(topology.brokers))
    return np.array([float(weights.get(b, 0.0)) for b in topology.brokers])


def select_rendezvous_nodes(
    topology: Topology, k: int, weights: Mapping[str, float] | None = None
) -> tuple[str, ...]:
    """Greedy k-median: repeatedly add the broker that most lowers weighted latency.

    Ties go to the lowest broker id. The result is returned sorted.
    """
    n = len(topology.brokers)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    dmat = topology.distance_matrix()
    w = _weights(topology, weights)
    current = np.full(n, np.inf)
    chosen: list[int] = []
    for _ in range(k):
        best_j, best_cost = -1, math.inf
        for j in range(n):
            if j in chosen:
                continue
            cand = np.minimum(current, dmat[:, j])
            # 0 * inf would poison the sum for zero-demand unreachable nodes
            cost = float(np.sum(np.where(w > 0, w * cand, 0.0)))
            if cost < best_cost:
                best_j, best_cost = j, cost
        chosen.append(best_j)
        current = np.minimum(current, dmat[:, best_j])
    return tuple(sorted(topology.brokers[j] for j in chosen))


# -- ICN --------------------------------------------------------------------


@dataclass(frozen=True)
class DeliveryTree:
    root: str
    edges: frozenset[tuple[str, str]]  # (parent, child)
    subscribers: frozenset[str]

    def children(self, node: str) -> list[str]:
        return sorted(c for p, c in self.edges if p == node)

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset({self.root}) | {c for _, c in self.edges}


def build_delivery_tree(topology: Topology, root: str, subscribers: Iterable[str]) -> DeliveryTree:
    """Topology-manager role: union of shortest-latency paths from ``root``."""
    subs = frozenset(subscribers) - {root}
    if not subs:
        raise EmptySubscriberSet(root)
    edges: set[tuple[str, str]] = set()
    for s in sorted(subs):
        hops = topology.path(root, s)
        edges.update(zip(hops, hops[1:]))
    return DeliveryTree(root, frozenset(edges), subs)


def to_icn_name(topic: TopicPath | str, scope: str = "global") -> str:
    """Attachment-point translation from a client topic to a scoped ICN name."""
    return f"/{scope}/{topic}"


def from_icn_name(name: str) -> tuple[str, str]:
    _, scope, topic = name.split("/", 2)
    return topic, scope


class RendezvousFunction:
    """Name directory mapping topic filters to the brokers subscribing to them."""

    def __init__(self) -> None:
        self._entries: dict[str, dict[str, int]] = {}

    def register(self, filter_text: str, broker: str) -> None:
        refs = self._entries.setdefault(filter_text, {})
        refs[broker] = refs.get(broker, 0) + 1

    def unregister(self, filter_text: str, broker: str) -> None:
        refs = self._entries.get(filter_text)
        if not refs or broker not in refs:
            return
        refs[broker] -= 1
        if refs[broker] == 0:
            del refs[broker]
        if not refs:
            del self._entries[filter_text]

    def resolve(self, topic: TopicPath) -> frozenset[str]:
        out: set[str] = set()
        for text, refs in self._entries.items():
            if matches(parse_filter(text), topic):
                out.update(refs)
        return frozenset(out)

    def apply(self, update: Mapping[str, Any]) -> None:
        if update["op"] == "add":
            self.register(update["filter"], update["broker"])
        else:
            self.unregister(update["filter"], update["broker"])

    def snapshot(self) -> dict[str, list[str]]:
        return {f: sorted(r) for f, r in sorted(self._entries.items())}


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class FederatedMessage:
    kind: str  # PUB | SUB | UNSUB | EMIT
    origin: str
    hop_brokers: tuple[str, ...]
    publication: Publication | None = None
    body: Mapping[str, Any] = field(default_factory=dict)
    header: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.hop_brokers)) != len(self.hop_brokers):
            raise ValueError(f"broker repeated in hop list {self.hop_brokers}")

    def with_hop(self, broker: str) -> "FederatedMessage":
        pub = self.publication.with_hop(broker) if self.publication is not None else None
        return replace(self, hop_brokers=self.hop_brokers + (broker,), publication=pub)


def bridge_on_publish(
    topology: Topology, broker: str, item: Publication | FederatedMessage
) -> list[tuple[str, FederatedMessage]]:
    """Flooding step: copy to every linked peer that has not seen the message."""
    if isinstance(item, Publication):
        msg = FederatedMessage("PUB", item.origin_broker, (item.origin_broker,), item)
    else:
        msg = item
    if broker not in msg.hop_brokers:
        msg = msg.with_hop(broker)
    seen = set(msg.hop_brokers)
    return [(peer, msg) for peer in topology.neighbors(broker) if peer not in seen]


# -- strategies -------------------------------------------------------------


class Strategy:
    """Per-broker federation behaviour; the base class handles relaying."""

    name = ""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.broker: BrokerNode | None = None

    @property
    def me(self) -> str:
        return self.broker.broker_id

    def bind(self, broker: "BrokerNode") -> None:
        self.broker = broker

    def runs_pipeline_locally(self, sub: "Subscription") -> bool:
        return True

    def on_subscribe(self, sub: "Subscription") -> None:
        pass

    def on_unsubscribe(self, sub: "Subscription") -> None:
        pass

    def on_publish(self, pub: Publication) -> None:
        pass

    def on_control(self, update: Mapping[str, Any]) -> None:
        pass

    def handle(self, msg: FederatedMessage, from_peer: str | None) -> None:
        raise NotImplementedError

    def receive(self, msg: FederatedMessage, from_peer: str | None) -> None:
        route = msg.header.get("route")
        if route and route[-1] != self.me:
            nxt = route[route.index(self.me) + 1]
            self.broker.metrics["relayed"] += 1
            self.broker.host.to_peer(nxt, msg.with_hop(self.me))
            return
        self.handle(msg, from_peer)

    def send_leg(self, dst: str, msg: FederatedMessage) -> None:
        """Source-routed delivery along the shortest-latency path to ``dst``."""
        if dst == self.me:
            self.handle(msg, None)
            return
        route = tuple(self.topology.path(self.me, dst))
        msg = replace(msg, header={**msg.header, "route": route})
        self.broker.host.to_peer(route[1], msg)


class BridgeStrategy(Strategy):
    name = "bridge"

    def on_publish(self, pub: Publication) -> None:
        for peer, msg in bridge_on_publish(self.topology, self.me, pub):
            self.broker.host.to_peer(peer, msg)

    def handle(self, msg: FederatedMessage, from_peer: str | None) -> None:
        pub = msg.publication
        if self.broker.has_evaluated(pub.msg_id):
            self.broker.metrics["duplicate_arrivals"] += 1
            return
        self.broker.evaluate(pub)
        for peer, out in bridge_on_publish(self.topology, self.me, msg):
            self.broker.host.to_peer(peer, out)


class ICNStrategy(Strategy):
    name = "icn"

    def __init__(self, topology: Topology):
        super().__init__(topology)
        self.directory = RendezvousFunction()

    def on_subscribe(self, sub: "Subscription") -> None:
        self.broker.host.to_coordinator({"op": "add", "filter": str(sub.expr.filter), "broker": self.me})

    def on_unsubscribe(self, sub: "Subscription") -> None:
        self.broker.host.to_coordinator({"op": "remove", "filter": str(sub.expr.filter), "broker": self.me})

    def on_control(self, update: Mapping[str, Any]) -> None:
        self.directory.apply(update)

    def plan(self, pub: Publication) -> DeliveryTree | None:
        try:
            return build_delivery_tree(self.topology, self.me, self.directory.resolve(pub.topic))
        except EmptySubscriberSet:
            return None

    def on_publish(self, pub: Publication) -> None:
        tree = self.plan(pub)
        if tree is None:
            return
        self.broker.metrics["trees_built"] += 1
        msg = FederatedMessage(
            "PUB", self.me, (self.me,), pub,
            header={"tree": tuple(sorted(tree.edges)), "subscribers": tuple(sorted(tree.subscribers))},
        )
        self._forward(tree, msg)

    def _forward(self, tree: DeliveryTree, msg: FederatedMessage) -> None:
        for child in tree.children(self.me):
            self.broker.host.to_peer(child, msg)

    def handle(self, msg: FederatedMessage, from_peer: str | None) -> None:
        tree = DeliveryTree(msg.origin, frozenset(msg.header["tree"]), frozenset(msg.header["subscribers"]))
        pub = msg.publication
        if self.me in tree.subscribers:
            if self.broker.has_evaluated(pub.msg_id):
                self.broker.metrics["duplicate_arrivals"] += 1
                return
            self.broker.evaluate(pub)
        self._forward(tree, msg.with_hop(self.me))


@dataclass
class RemoteEntry:
    home: str
    client_id: str
    sub_id: Any
    expr: SubscriptionExpr
    designated: str
    stub: bool
    state: AggregationState = field(default_factory=AggregationState)

    @property
    def key(self) -> tuple:
        return (self.home, self.client_id, self.sub_id)


class RendezvousStrategy(Strategy):
    """Subscriptions meet publications at hash-selected rendezvous nodes.

    Pipelines run at the RN and only emissions travel on to the subscriber's
    home broker. Filters with a wildcard first level are registered at every
    RN as forwarding stubs, with the pipeline itself at the lowest-id RN.
    """

    name = "rendezvous"

    def __init__(self, topology: Topology, ring: RendezvousRing):
        super().__init__(topology)
        self.ring = ring
        self.entries: dict[tuple, RemoteEntry] = {}
        self.seen: set[str] = set()
        self.evaluation_log: list[str] = []

    def runs_pipeline_locally(self, sub: "Subscription") -> bool:
        return False

    def _targets(self, flt: TopicFilter) -> tuple[list[str], str]:
        rn = rn_for_topic(self.ring, flt)
        if rn == BROADCAST:
            return sorted(self.ring.rn_set), self.ring.designated
        return [rn], rn

    def _advertise(self, kind: str, sub: "Subscription") -> None:
        targets, designated = self._targets(sub.expr.filter)
        body = {
            "home": self.me, "client": sub.client_id, "sub_id": sub.sub_id,
            "expr": sub.text, "designated": designated,
        }
        for rn in targets:
            self.send_leg(rn, FederatedMessage(kind, self.me, (self.me,), body=body))

    def on_subscribe(self, sub: "Subscription") -> None:
        self._advertise("SUB", sub)

    def on_unsubscribe(self, sub: "Subscription") -> None:
        self._advertise("UNSUB", sub)

    def on_publish(self, pub: Publication) -> None:
        rn = rn_for_topic(self.ring, pub.topic)
        self.send_leg(rn, FederatedMessage("PUB", self.me, (self.me,), pub))

    def handle(self, msg: FederatedMessage, from_peer: str | None) -> None:
        getattr(self, "_on_" + msg.kind.lower())(msg)

    def _on_sub(self, msg: FederatedMessage) -> None:
        b = msg.body
        expr = parse_subscription(b["expr"], self.broker.registry.names())
        entry = RemoteEntry(b["home"], b["client"], b["sub_id"], expr, b["designated"], b["designated"] != self.me)
        self.entries[entry.key] = entry

    def _on_unsub(self, msg: FederatedMessage) -> None:
        b = msg.body
        key = (b["home"], b["client"], b["sub_id"])
        self.entries.pop(key, None)
        self.broker.forget_window(key)

    def _on_pub(self, msg: FederatedMessage) -> None:
        pub = msg.publication
        if pub.msg_id in self.seen:
            self.broker.metrics["duplicate_arrivals"] += 1
            return
        self.seen.add(pub.msg_id)
        self.evaluation_log.append(pub.msg_id)
        forward_to: set[str] = set()
        for key in sorted(self.entries, key=repr):
            entry = self.entries[key]
            if not matches(entry.expr.filter, pub.topic):
                continue
            if entry.stub:
                forward_to.add(entry.designated)
                continue
            emissions = eval_pipeline(entry.expr, pub, entry.state, self.broker.registry, entry.sub_id)
            self._ship(entry, emissions)
            self.broker.arm_window(entry.key, entry.expr, entry.state, lambda ems, e=entry: self._ship(e, ems),
                                   lambda e=entry: self.entries.get(e.key) is e)
        for rn in sorted(forward_to - {self.me}):
            self.send_leg(rn, FederatedMessage("PUB", self.me, (self.me,), pub))

    def _ship(self, entry: RemoteEntry, emissions: list[Emission]) -> None:
        for em in emissions:
            body = {"client": entry.client_id, "sub_id": entry.sub_id, "emission": em}
            self.send_leg(entry.home, FederatedMessage("EMIT", self.me, (self.me,), body=body))

    def _on_emit(self, msg: FederatedMessage) -> None:
        b = msg.body
        self.broker.deliver(b["client"], b["sub_id"], b["emission"])


def make_strategy(name: str, topology: Topology, ring: RendezvousRing | None = None) -> Strategy:
    if name == "bridge":
        return BridgeStrategy(topology)
    if name == "icn":
        return ICNStrategy(topology)
    if name == "rendezvous":
        if ring is None:
            ring = RendezvousRing(select_rendezvous_nodes(topology, 1))
        return RendezvousStrategy(topology, ring)
    raise ValueError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
