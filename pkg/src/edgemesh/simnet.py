"""Deterministic discrete-event simulation of federated brokers and clients.

Everything runs on one event queue ordered by ``(time, sequence)``. Randomness
(link drops only) comes from per-link RNG streams seeded from the scenario
seed and the link id, so adding a link never perturbs the others.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import heapq
import io
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .aggregation import CapabilityRegistry
from .broker import BrokerNode, decode_frame, decode_value, encode_frame
from .federation import (
    Edge,
    RendezvousFunction,
    RendezvousRing,
    Topology,
    make_strategy,
    select_rendezvous_nodes,
)


class DiscoveryTimeout(RuntimeError):
    pass


# -- engine -----------------------------------------------------------------


@dataclass(order=True)
class Event:
    time: float
    seq: int
    fn: Callable = field(compare=False, repr=False)
    args: tuple = field(compare=False, repr=False, default=())
    target: str = field(compare=False, default="")
    kind: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    def __init__(self) -> None:
        self.now = 0.0
        self._queue: list[Event] = []
        self._seq = 0
        self.trace: list[str] = []

    def schedule(self, delay: float, fn: Callable, *args: Any, target: str = "", kind: str = "") -> Event:
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        return self.schedule_at(self.now + delay, fn, *args, target=target, kind=kind)

    def schedule_at(self, time: float, fn: Callable, *args: Any, target: str = "", kind: str = "") -> Event:
        if time < self.now:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        event = Event(time, self._seq, fn, args, target, kind)
        heapq.heappush(self._queue, event)
        return event

    def run_until(self, t_end: float) -> list[str]:
        """Execute every event with ``time <= t_end``; returns the trace of this call."""
        start = len(self.trace)
        while self._queue and self._queue[0].time <= t_end:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.time
            self.trace.append(f"{event.time:.3f} {event.seq} {event.target} {event.kind}")
            event.fn(*event.args)
        self.now = max(self.now, t_end)
        return self.trace[start:]

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)


# -- links ------------------------------------------------------------------


@dataclass
class LinkStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


class Link:
    """Point-to-point or broadcast link with fixed latency and Bernoulli loss.

    ``reliable`` links model a stream transport: a dropped attempt is resent
    after ``rto`` and frames stay in FIFO order. Unreliable links just lose
    the frame.
    """

    def __init__(self, link_id: str, endpoints: tuple[str, ...], latency: float, drop: float = 0.0,
                 kind: str = "access", seed: int = 0, reliable: bool = False):
        if not latency > 0:
            raise ValueError(f"link {link_id}: latency must be positive")
        if not 0 <= drop < 1:
            raise ValueError(f"link {link_id}: drop probability must be in [0, 1)")
        self.id = link_id
        self.endpoints = endpoints
        self.latency = latency
        self.drop = drop
        self.kind = kind
        self.reliable = reliable
        self.rto = 2 * latency + 10
        self.rng = random.Random(f"{seed}/{link_id}")
        self.stats = LinkStats()
        self._last_arrival: dict[str, float] = {}

    def _lost(self) -> bool:
        return self.drop > 0 and self.rng.random() < self.drop

    def transmit(self, sim: Simulator, src: str, deliver: Callable, *args: Any, target: str = "",
                 kind: str = "") -> bool:
        """Schedule delivery of one frame; returns False if it was lost."""
        if self.reliable:
            attempts = 1
            while self._lost():
                attempts += 1
            self.stats.sent += attempts
            self.stats.dropped += attempts - 1
            arrival = max(sim.now + (attempts - 1) * self.rto + self.latency, self._last_arrival.get(src, 0.0))
            self._last_arrival[src] = arrival
            # absolute time: now + (arrival - now) can round below an earlier arrival
            sim.schedule_at(arrival, self._arrive, deliver, args, target=target, kind=kind)
            return True
        self.stats.sent += 1
        if self._lost():
            self.stats.dropped += 1
            return False
        sim.schedule(self.latency, self._arrive, deliver, args, target=target, kind=kind)
        return True

    def _arrive(self, deliver: Callable, args: tuple) -> None:
        self.stats.delivered += 1
        deliver(*args)

    def row(self) -> dict:
        in_flight = self.stats.sent - self.stats.delivered - self.stats.dropped
        return {
            "id": self.id, "endpoints": "-".join(self.endpoints), "kind": self.kind,
            "latency": self.latency, "drop": self.drop, "sent": self.stats.sent,
            "delivered": self.stats.delivered, "dropped": self.stats.dropped, "in_flight": in_flight,
        }


# -- processes --------------------------------------------------------------


class BrokerProcess:
    """Simulator-side host for one :class:`BrokerNode`."""

    def __init__(self, world: "World", node: BrokerNode):
        self.world = world
        self.node = node
        node.host = self

    @property
    def id(self) -> str:
        return self.node.broker_id

    def now(self) -> float:
        return self.world.sim.now

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Event:
        return self.world.sim.schedule(delay, fn, *args, target=self.id, kind="timer")

    def to_client(self, client_id: str, frame: dict) -> None:
        self.world.broker_to_client(self.id, client_id, frame)

    def to_peer(self, peer: str, msg: Any) -> None:
        self.world.broker_to_broker(self.id, peer, msg)

    def to_coordinator(self, update: dict) -> None:
        self.world.to_coordinator(self.id, update)


@dataclass
class Delivery:
    time: float
    client: str
    sub_id: Any
    expr: str
    value: Any
    window: Any
    latency: float
    mid: str | None = None

    def key(self) -> str:
        value = self.value
        if isinstance(value, bytes):
            value = "b64:" + base64.b64encode(value).decode("ascii")
        return json.dumps([self.client, self.expr, value, self.window], sort_keys=True)


class ClientProcess:
    def __init__(self, world: "World", spec: dict):
        self.world = world
        self.id: str = spec["id"]
        self.home_link: str = spec["attach"]
        self.join_at: float = spec.get("join", 0)
        self.script = sorted(spec.get("script", []), key=lambda a: a["at"])
        self.state = "idle"
        self.link: str | None = None
        self.broker: str | None = None
        self.epoch = 0
        self.subs: dict[int, dict] = {}
        self.next_sub_id = 1
        self.next_mid = 1
        self.outbox: list[dict] = []
        self.unacked_pubs: dict[str, dict] = {}
        self.outstanding: dict[tuple, dict] = {}
        self.received_mids: set[str] = set()
        self.deliveries: list[Delivery] = []
        self.duplicates = 0
        self.sub_frames_sent: list[tuple[float, str, dict]] = []
        self.rejections: list[dict] = []
        self.discoveries: list[tuple[float, str]] = []
        self.timeouts: list[float] = []

    def start(self) -> None:
        sim = self.world.sim
        sim.schedule(self.join_at, self.attach, self.home_link, target=self.id, kind="join")
        for action in self.script:
            delay = action["at"] - sim.now
            sim.schedule(max(0.0, delay), self.act, action, target=self.id, kind="action:" + action["do"])

    # discovery / mobility

    def attach(self, link_id: str) -> None:
        self.link = link_id
        self.state = "discovering"
        self.epoch += 1
        self.world.access[link_id].listeners.add(self.id)
        period = self.world.beacon_period
        self.world.sim.schedule(3 * period, self._discovery_deadline, self.epoch, target=self.id,
                                kind="discovery_check")

    def _discovery_deadline(self, epoch: int) -> None:
        if epoch == self.epoch and self.state == "discovering":
            self.timeouts.append(self.world.sim.now)
            self.world.counters["discovery_timeouts"] += 1

    def on_beacon(self, broker: str) -> None:
        if self.state != "discovering":
            return
        self.discoveries.append((self.world.sim.now, broker))
        self.broker = broker
        self.state = "connecting"
        self._reliable(("CONNECT",), {"t": "CONNECT", "client": self.id, "conn": f"{self.id}#{self.epoch}"})

    def detach(self) -> None:
        if self.link is not None:
            self.world.access[self.link].listeners.discard(self.id)
        if self.broker is not None and self.state in ("connecting", "connected"):
            self.world.link_down(self.broker, self.id)
        self.outstanding.clear()
        # unacked qos 1 publishes are resent after reconnecting
        self.outbox = list(self.unacked_pubs.values()) + self.outbox
        self.unacked_pubs.clear()
        self.state = "idle"
        self.broker = None
        self.link = None

    # script

    def act(self, action: dict) -> None:
        do = action["do"]
        if do == "subscribe":
            sub_id = action.get("id", self.next_sub_id)
            self.next_sub_id = max(self.next_sub_id, sub_id + 1)
            self.subs[sub_id] = {"expr": action["expr"], "qos": action.get("qos", 0),
                                 "scope": action.get("scope", "global")}
            if self.state == "connected":
                self._send_subscribe(sub_id)
        elif do == "unsubscribe":
            sub_id = action.get("id")
            if sub_id is None:
                sub_id = next((i for i, s in self.subs.items() if s["expr"] == action["expr"]), None)
            if sub_id in self.subs:
                del self.subs[sub_id]
                if self.state == "connected":
                    self._reliable(("UNSUBSCRIBE", sub_id), {"t": "UNSUBSCRIBE", "id": sub_id})
        elif do == "publish":
            frame = {
                "t": "PUBLISH", "topic": action["topic"], "qos": action.get("qos", 0),
                "scope": action.get("scope", "global"),
                "payload": base64.b64encode(payload_bytes(action)).decode("ascii"),
                "mid": f"{self.id}/p{self.next_mid}",
            }
            self.next_mid += 1
            if self.state == "connected":
                self._send_publish(frame)
            else:
                self.outbox.append(frame)
        elif do == "move":
            self.detach()
            self.attach(action["link"])
        elif do == "disconnect":
            if self.state == "connected":
                self._send({"t": "DISCONNECT"})
                self.world.access[self.link].listeners.discard(self.id)
            self.state = "idle"
        else:
            raise ValueError(f"unknown action {do!r}")

    def _send(self, frame: dict) -> None:
        self.world.client_to_broker(self.id, self.link, self.broker, frame)

    def _reliable(self, key: tuple, frame: dict) -> None:
        self.outstanding[key] = frame
        self._send(frame)
        self.world.sim.schedule(self.world.retry_timeout, self._retry, key, self.epoch, target=self.id,
                                kind="retry")

    def _retry(self, key: tuple, epoch: int) -> None:
        if epoch != self.epoch or key not in self.outstanding:
            return
        frame = self.outstanding[key]
        if frame["t"] == "PUBLISH":
            frame = {**frame, "dup": True}
            self.outstanding[key] = frame
        self._send(frame)
        self.world.sim.schedule(self.world.retry_timeout, self._retry, key, epoch, target=self.id, kind="retry")

    def _send_subscribe(self, sub_id: int) -> None:
        s = self.subs[sub_id]
        frame = {"t": "SUBSCRIBE", "id": sub_id, "expr": s["expr"], "qos": s["qos"], "scope": s["scope"]}
        self.sub_frames_sent.append((self.world.sim.now, self.broker, frame))
        self._reliable(("SUBSCRIBE", sub_id), frame)

    def _send_publish(self, frame: dict) -> None:
        if frame["qos"] == 1:
            self.unacked_pubs[frame["mid"]] = frame
            self._reliable(("PUBLISH", frame["mid"]), frame)
        else:
            self._send(frame)

    # frames from the broker

    def on_frame(self, broker: str, frame: dict) -> None:
        if broker != self.broker:
            return
        kind = frame["t"]
        if kind == "CONNACK":
            if self.state != "connecting" or frame.get("conn") != f"{self.id}#{self.epoch}":
                return
            self.outstanding.pop(("CONNECT",), None)
            self.state = "connected"
            for sub_id in sorted(self.subs):
                self._send_subscribe(sub_id)
            pending, self.outbox = self.outbox, []
            for f in pending:
                self._send_publish(f)
        elif kind == "SUBACK":
            self.outstanding.pop(("SUBSCRIBE", frame["id"]), None)
            if not frame["ok"]:
                self.rejections.append(frame)
        elif kind == "UNSUBACK":
            self.outstanding.pop(("UNSUBSCRIBE", frame["id"]), None)
        elif kind == "PUBACK":
            self.outstanding.pop(("PUBLISH", frame["mid"]), None)
            self.unacked_pubs.pop(frame["mid"], None)
        elif kind == "ERROR":
            if frame.get("mid"):
                self.outstanding.pop(("PUBLISH", frame["mid"]), None)
                self.unacked_pubs.pop(frame["mid"], None)
        elif kind == "EMIT":
            self._on_emit(frame)

    def _on_emit(self, frame: dict) -> None:
        mid = frame.get("mid")
        if mid is not None:
            self._send({"t": "PUBACK", "mid": mid})
            if mid in self.received_mids:
                self.duplicates += 1
                return
            self.received_mids.add(mid)
        now = self.world.sim.now
        sub = self.subs.get(frame["sub"], {})
        self.deliveries.append(Delivery(
            now, self.id, frame["sub"], sub.get("expr", ""), decode_value(frame), frame["window"],
            now - frame["ts"], mid,
        ))


def payload_bytes(action: dict) -> bytes:
    if "json" in action:
        return json.dumps(action["json"], sort_keys=True).encode("utf-8")
    if "size" in action:
        return bytes(int(action["size"]))
    payload = action.get("payload", "")
    if not isinstance(payload, str):
        payload = json.dumps(payload)
    return payload.encode("utf-8")


class AccessPoint:
    """Broadcast access link shared by clients and the brokers that beacon on it."""

    def __init__(self, link: Link, brokers: tuple[str, ...], offsets: dict[str, float]):
        self.link = link
        self.brokers = brokers
        self.offsets = offsets
        self.listeners: set[str] = set()


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsReport:
    strategy: str
    seed: int
    t_end: float
    inter_broker_msgs: int = 0
    control_msgs: int = 0
    relayed: int = 0
    deliveries: int = 0
    delivery_digest: str = ""
    duplicate_deliveries: int = 0
    latency_p50: float = 0.0
    latency_p95: float = 0.0
    latency_max: float = 0.0
    handover_losses: int = 0
    admission_rejections: int = 0
    discovery_timeouts: int = 0
    qos1_emitted: int = 0
    qos1_delivered: int = 0
    retransmissions: int = 0
    undeliverable: int = 0
    brokers: dict[str, dict[str, int]] = field(default_factory=dict)
    links: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def links_csv(self) -> str:
        buf = io.StringIO()
        cols = ["id", "endpoints", "kind", "latency", "drop", "sent", "delivered", "dropped", "in_flight"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.links:
            writer.writerow(row)
        return buf.getvalue()


# -- world ------------------------------------------------------------------


class World:
    """A fully wired scenario: brokers, overlay links, access links and clients."""

    def __init__(self, scenario: dict):
        self.scenario = scenario
        self.seed = int(scenario.get("seed", 0))
        self.t_end = float(scenario["t_end"])
        self.beacon_period = float(scenario.get("beacon_period", 1000))
        self.retry_timeout = float(scenario.get("retry_timeout", 2000))
        self.rf_latency = float(scenario.get("rf_latency", 1))
        self.sim = Simulator()
        self.counters: Counter = Counter()
        self.rf = RendezvousFunction()

        strategy = scenario.get("strategy", "bridge")
        if isinstance(strategy, dict):
            extras = strategy
            strategy = strategy["name"]
        else:
            extras = scenario
        self.strategy_name = strategy

        broker_specs = [b if isinstance(b, dict) else {"id": b} for b in scenario["brokers"]]
        edges = [Edge(l["a"], l["b"], float(l["latency"]), l.get("kind", "X2")) for l in scenario["links"]]
        self.topology = Topology([b["id"] for b in broker_specs], edges)
        self.ring = None
        if strategy == "rendezvous" and broker_specs:
            if extras.get("rn_set"):
                rn_set = tuple(extras["rn_set"])
            else:
                k = min(int(extras.get("rn_count", 1)), len(broker_specs))
                rn_set = select_rendezvous_nodes(self.topology, k, extras.get("demand"))
            self.ring = RendezvousRing(rn_set)

        self.links: dict[tuple[str, str], Link] = {}
        for spec in scenario["links"]:
            key = tuple(sorted((spec["a"], spec["b"])))
            self.links[key] = Link(
                f"{key[0]}-{key[1]}", key, float(spec["latency"]), float(spec.get("drop", 0.0)),
                spec.get("kind", "X2"), self.seed, reliable=True,
            )

        default_caps = scenario.get("capabilities", {"CNTPPL": 10, "PROCESS": 25})
        self.brokers: dict[str, BrokerProcess] = {}
        for spec in broker_specs:
            node = BrokerNode(
                spec["id"],
                registry=CapabilityRegistry(spec.get("capabilities", default_caps)),
                budget=int(spec.get("budget", scenario.get("budget", 100))),
                retry_timeout=self.retry_timeout,
                window_grace=float(scenario.get("window_grace", 1000)),
            )
            node.attach_strategy(make_strategy(strategy, self.topology, self.ring))
            node.peer_free_budget = self._free_budgets
            self.brokers[node.broker_id] = BrokerProcess(self, node)

        access_specs = scenario.get("access")
        if access_specs is None:
            access_specs = [{"id": b["id"], "brokers": [b["id"]], "latency": 1} for b in broker_specs]
        self.access: dict[str, AccessPoint] = {}
        for spec in access_specs:
            link = Link(f"access:{spec['id']}", tuple(spec["brokers"]), float(spec.get("latency", 1)),
                        float(spec.get("drop", 0.0)), "access", self.seed)
            offsets = {b: float(self._broker_spec(broker_specs, b).get("beacon_offset", 0)) for b in spec["brokers"]}
            self.access[spec["id"]] = AccessPoint(link, tuple(spec["brokers"]), offsets)

        self.clients: dict[str, ClientProcess] = {}
        for spec in scenario.get("clients", []):
            self.clients[spec["id"]] = ClientProcess(self, spec)

    @staticmethod
    def _broker_spec(specs: list[dict], broker_id: str) -> dict:
        return next((s for s in specs if s["id"] == broker_id), {})

    def _free_budgets(self) -> dict[str, int]:
        return {b: p.node.budget - p.node.used for b, p in sorted(self.brokers.items())}

    # transport

    def broker_to_broker(self, src: str, dst: str, msg: Any) -> None:
        link = self.links[tuple(sorted((src, dst)))]
        link.transmit(self.sim, src, self.brokers[dst].node.receive, msg, src, target=dst,
                      kind=f"fed:{msg.kind}")

    def to_coordinator(self, src: str, update: dict) -> None:
        self.counters["control_msgs"] += 1
        self.sim.schedule(self.rf_latency, self._rf_update, update, target="rf", kind="rf:" + update["op"])

    def _rf_update(self, update: dict) -> None:
        self.rf.apply(update)
        for broker_id in sorted(self.brokers):
            self.counters["control_msgs"] += 1
            self.sim.schedule(self.rf_latency, self.brokers[broker_id].node.control, update, target=broker_id,
                              kind="rf:sync")

    def client_to_broker(self, client_id: str, link_id: str, broker_id: str, frame: dict) -> None:
        ap = self.access[link_id]
        frame = decode_frame(encode_frame(frame))
        ap.link.transmit(self.sim, client_id, self._at_broker, broker_id, client_id, link_id, frame,
                         target=broker_id, kind="frame:" + frame["t"])

    def _at_broker(self, broker_id: str, client_id: str, link_id: str, frame: dict) -> None:
        client = self.clients[client_id]
        if client.link != link_id and frame["t"] != "DISCONNECT":
            self.counters["stale_frames"] += 1
            return
        self.brokers[broker_id].node.handle_frame(client_id, frame)

    def broker_to_client(self, broker_id: str, client_id: str, frame: dict) -> None:
        client = self.clients.get(client_id)
        if client is None or client.link is None or broker_id not in self.access[client.link].brokers:
            self.counters["handover_loss"] += 1
            return
        link_id = client.link
        frame = decode_frame(encode_frame(frame))
        self.access[link_id].link.transmit(self.sim, broker_id, self._at_client, broker_id, client_id, link_id,
                                           frame, target=client_id, kind="frame:" + frame["t"])

    def _at_client(self, broker_id: str, client_id: str, link_id: str, frame: dict) -> None:
        client = self.clients[client_id]
        if client.link != link_id or client.broker != broker_id:
            # qos 1 emits are already counted as pending by the old broker
            if frame["t"] == "EMIT" and "mid" not in frame:
                self.counters["handover_loss"] += 1
            return
        client.on_frame(broker_id, frame)

    def link_down(self, broker_id: str, client_id: str) -> None:
        """The old broker notices the client's departure (connection reset)."""
        self.brokers[broker_id].node.disconnect(client_id, reason="handover")

    def _beacon(self, link_id: str, broker_id: str) -> None:
        ap = self.access[link_id]
        ap.link.transmit(self.sim, broker_id, self._beacon_arrival, link_id, broker_id, target=link_id,
                         kind=f"beacon:{broker_id}")
        if self.sim.now + self.beacon_period <= self.t_end:
            self.sim.schedule(self.beacon_period, self._beacon, link_id, broker_id, target=link_id, kind="beacon_tx")

    def _beacon_arrival(self, link_id: str, broker_id: str) -> None:
        for client_id in sorted(self.access[link_id].listeners):
            self.clients[client_id].on_beacon(broker_id)

    # running

    def start(self) -> None:
        for broker_id in sorted(self.brokers):
            self.brokers[broker_id].node.start()
        for link_id in sorted(self.access):
            ap = self.access[link_id]
            for broker_id in ap.brokers:
                self.sim.schedule(ap.offsets[broker_id], self._beacon, link_id, broker_id, target=link_id,
                                  kind="beacon_tx")
        for client_id in sorted(self.clients):
            self.clients[client_id].start()

    def run(self) -> MetricsReport:
        self.start()
        self.sim.run_until(self.t_end)
        return self.report()

    def discover(self, client_id: str) -> str:
        """Broker the client currently uses, or raise if discovery timed out."""
        client = self.clients[client_id]
        if client.broker is None:
            if client.timeouts:
                raise DiscoveryTimeout(f"{client_id}: no beacon within {3 * self.beacon_period:g} ms")
            raise DiscoveryTimeout(f"{client_id}: not attached")
        return client.broker

    def deliveries(self) -> list[Delivery]:
        out = [d for c in sorted(self.clients) for d in self.clients[c].deliveries]
        return sorted(out, key=lambda d: (d.time, d.client, repr(d.sub_id)))

    def delivery_multiset(self) -> Counter:
        return Counter(d.key() for d in self.deliveries())

    def report(self) -> MetricsReport:
        deliveries = self.deliveries()
        latencies = np.array([d.latency for d in deliveries], dtype=float)
        if latencies.size:
            p50, p95 = (float(x) for x in np.percentile(latencies, [50, 95]))
            lmax = float(latencies.max())
        else:
            p50 = p95 = lmax = 0.0
        digest = hashlib.sha256("\n".join(sorted(d.key() for d in deliveries)).encode()).hexdigest()
        nodes = {b: self.brokers[b].node for b in sorted(self.brokers)}
        inter = [self.links[k] for k in sorted(self.links)]
        qos1_emitted = {mid for n in nodes.values() for _, mid in n.qos1_emitted}
        qos1_received = {m for c in self.clients.values() for m in c.received_mids}
        links = [l.row() for l in inter] + [self.access[a].link.row() for a in sorted(self.access)]
        return MetricsReport(
            strategy=self.strategy_name,
            seed=self.seed,
            t_end=self.t_end,
            inter_broker_msgs=sum(l.stats.sent for l in inter),
            control_msgs=self.counters["control_msgs"],
            relayed=sum(n.metrics["relayed"] for n in nodes.values()),
            deliveries=len(deliveries),
            delivery_digest=digest,
            duplicate_deliveries=sum(c.duplicates for c in self.clients.values()),
            latency_p50=p50,
            latency_p95=p95,
            latency_max=lmax,
            handover_losses=self.counters["handover_loss"] + sum(n.metrics["handover_loss"] for n in nodes.values()),
            admission_rejections=sum(n.metrics["admission_rejections"] for n in nodes.values()),
            discovery_timeouts=self.counters["discovery_timeouts"],
            qos1_emitted=len(qos1_emitted),
            qos1_delivered=len(qos1_emitted & qos1_received),
            retransmissions=sum(n.metrics["retransmissions"] for n in nodes.values()),
            undeliverable=sum(n.metrics["undeliverable"] for n in nodes.values()),
            brokers={b: dict(sorted(n.metrics.items())) for b, n in nodes.items()},
            links=links,
        )


def run_scenario(scenario: dict) -> tuple[MetricsReport, World]:
    world = World(scenario)
    report = world.run()
    return report, world
