"""Checks shared by the module tests and the acceptance suite.

Each ``check_*`` function returns a :class:`Outcome`; the acceptance suite
runs them at full size, module tests at reduced size.
"""

from __future__ import annotations

import json
import random
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

import oracles
from edgemesh.aggregation import AggregationState, Publication, eval_pipeline, tick_pipeline
from edgemesh.broker import OVER_BUDGET, BrokerNode, ManualHost
from edgemesh.federation import Edge, Topology, select_rendezvous_nodes
from edgemesh.grammar import (
    DegenerateSpatialWarning,
    GrammarError,
    matches,
    parse_filter,
    parse_subscription,
    parse_topic,
    render_subscription,
)
from edgemesh.simnet import World

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


@dataclass
class Outcome:
    ok: bool
    detail: str
    elapsed: float = 0.0
    failures: list = field(default_factory=list)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSpatialWarning)
            out = fn(*args, **kwargs)
        out.elapsed = time.perf_counter() - t0
        return out
    wrapper.__name__ = fn.__name__
    return wrapper


def scenario(name: str) -> dict:
    return json.loads((SCENARIOS / f"{name}.json").read_text())


def with_strategy(data: dict, strategy: str) -> dict:
    out = json.loads(json.dumps(data))
    out["strategy"] = strategy
    return out


# -- 1. grammar --------------------------------------------------------------


@_timed
def check_grammar_conformance(n_valid: int = 10_000, n_invalid: int = 1_000, seed: int = 2024) -> Outcome:
    rng = random.Random(seed)
    failures = []
    for _ in range(n_valid):
        text = oracles.random_expression(rng)
        try:
            expr = parse_subscription(text)
            if render_subscription(expr) != text or parse_subscription(render_subscription(expr)) != expr:
                failures.append(("roundtrip", text))
        except GrammarError as exc:
            failures.append(("rejected-valid", text, str(exc)))
    accepted = []
    for text in oracles.mutation_corpus(n_invalid, seed=seed):
        try:
            parse_subscription(text)
            accepted.append(text)
        except GrammarError:
            pass
    failures += [("accepted-invalid", t) for t in accepted]
    detail = (f"{n_valid - sum(1 for f in failures if f[0] != 'accepted-invalid')}/{n_valid} round-trips, "
              f"{n_invalid - len(accepted)}/{n_invalid} rejections")
    return Outcome(not failures, detail, failures=failures[:10])


# -- 2. matching -------------------------------------------------------------


@_timed
def check_matching_exhaustive(max_levels: int = 4) -> Outcome:
    filters = list(oracles.all_filters(max_levels=max_levels))
    topics = list(oracles.all_topics(max_levels=max_levels))
    parsed_topics = [parse_topic(t) for t in topics]
    failures = []
    pairs = 0
    for f in filters:
        pf = parse_filter(f)
        rx = oracles.filter_regex(f)
        for t, pt in zip(topics, parsed_topics):
            pairs += 1
            if matches(pf, pt) != (rx.match(t) is not None):
                failures.append((f, t))
    # the '$' rule, over the same filters with $SYS-rooted topics
    for f in filters:
        pf = parse_filter(f)
        for t in ("$SYS/a", "$SYS/a/b", "$SYS"):
            pairs += 1
            if matches(pf, parse_topic(t, allow_sys=True)) != oracles.brute_match(f, t):
                failures.append((f, t))
    detail = f"{pairs - len(failures)}/{pairs} pairs agree ({len(filters)} filters x {len(topics)} topics)"
    return Outcome(not failures, detail, failures=failures[:10])


# -- 3. aggregation ----------------------------------------------------------

_FILTERS = ["+/+", "site1/+", "+/dev2", "site0/#", "#"]


def _random_stream(rng: random.Random):
    n = rng.randint(1, 1000)
    n_topics = rng.randint(1, 20)
    topics = [f"site{i % 4}/dev{i // 4}" for i in range(n_topics)]
    gap_max = rng.choice([30_000, 200_000, 600_000, 3_000_000])
    ts = np.cumsum([rng.randint(0, gap_max) for _ in range(n)]).astype(float)
    pubs = []
    for i in range(n):
        value = rng.randint(-200, 200) / 4
        people = rng.randint(0, 9)
        payload = json.dumps({"value": value, "people": people}).encode()
        pubs.append((rng.choice(topics), value, people, float(ts[i]), payload))
    return pubs


def _random_subscription(rng: random.Random) -> dict:
    agg = rng.choice(oracles.AGGS)
    window = rng.choice(list(oracles.WINDOWS))
    flt = rng.choice(_FILTERS)
    c = rng.randint(-30, 30) / 2
    kind = rng.choice(["temporal", "spatial", "pred-spatial", "pred-temporal", "proc-temporal",
                       "temporal-pred", "proc-spatial"])
    op = rng.choice(["GT", "LT"])
    text = {
        "temporal": f"${window}{agg}/{flt}",
        "spatial": f"${agg}/{flt}",
        "pred-spatial": f"${agg}${op};{c}/{flt}",
        "pred-temporal": f"${window}{agg}${op};{c}/{flt}",
        "proc-temporal": f"${window}{agg}$CNTPPL/{flt}",
        "temporal-pred": f"${op};{c}${window}{agg}/{flt}",
        "proc-spatial": f"${agg}$CNTPPL/{flt}",
    }[kind]
    return {"kind": kind, "text": text, "agg": agg, "window": window, "filter": flt, "op": op, "c": c}


def oracle_emissions(sub: dict, stream) -> list[float]:
    chosen = [p for p in stream if oracles.brute_match(sub["filter"], p[0])]
    use_people = sub["kind"].startswith("proc")
    topics = [p[0] for p in chosen]
    values = np.array([p[2] if use_people else p[1] for p in chosen], dtype=float)
    ts = np.array([p[3] for p in chosen], dtype=float)
    if sub["kind"].startswith("pred"):
        keep = np.array([oracles.predicate(sub["op"], sub["c"])(v) for v in values], dtype=bool)
        topics = [t for t, k in zip(topics, keep) if k]
        values, ts = values[keep], ts[keep]
    if "spatial" in sub["kind"]:
        return oracles.oracle_spatial(sub["agg"], topics, values)
    out = oracles.oracle_temporal(sub["agg"], sub["window"], ts, values)
    if sub["kind"] == "temporal-pred":
        out = [v for v in out if oracles.predicate(sub["op"], sub["c"])(v)]
    return out


def engine_emissions(sub: dict, stream) -> list:
    expr = parse_subscription(sub["text"])
    state = AggregationState()
    out = []
    for i, (topic, _, _, ts, payload) in enumerate(stream):
        pub = Publication(parse_topic(topic), payload, ts, "B", f"m{i}")
        out.extend(eval_pipeline(expr, pub, state, sub_id=0))
    out.extend(tick_pipeline(expr, state, 1e15, 0, sub_id=0))
    return out


def _close(agg: str, got: float, want: float) -> bool:
    if agg == "AVG":
        return abs(got - want) <= 1e-9 * abs(want)
    return got == want


@_timed
def check_aggregation_oracle(n_streams: int = 200, subs_per_stream: int = 6, seed: int = 31) -> Outcome:
    rng = random.Random(seed)
    failures = []
    compared = 0
    for s in range(n_streams):
        stream = _random_stream(rng)
        for _ in range(subs_per_stream):
            sub = _random_subscription(rng)
            want = oracle_emissions(sub, stream)
            got = engine_emissions(sub, stream)
            windows = [e.window.index for e in got if e.window is not None]
            if windows != sorted(set(windows)):
                failures.append((s, sub["text"], "window indices not strictly increasing"))
            if len(got) != len(want) or not all(_close(sub["agg"], float(g.value), w) for g, w in zip(got, want)):
                failures.append((s, sub["text"], [float(g.value) for g in got][:5], want[:5]))
            compared += len(want)
    detail = f"{n_streams} streams, {n_streams * subs_per_stream} subscriptions, {compared} emissions compared"
    return Outcome(not failures, detail, failures=failures[:5])


# -- 4. vehicle sharing ------------------------------------------------------


def _count_emissions(world: World) -> list:
    return [d.value for d in world.deliveries() if d.client == "traffic"]


@_timed
def check_vehicle_replay() -> Outcome:
    data = scenario("vehicle_sharing")
    # expected count: distinct cars whose latest gated location report equals int_id
    latest: dict[str, bool] = {}
    expected = []
    reports = sorted(
        ((a["at"], c["id"], a["payload"]) for c in data["clients"] for a in c["script"]
         if a["do"] == "publish" and a["topic"].endswith("/location")),
    )
    for _, car, payload in reports:
        if payload == "int_id":
            latest[car] = True
            expected.append(len(latest))
    video_pubs = [a for c in data["clients"] for a in c["script"] if a.get("topic") == "car_id/video"]
    failures = []
    details = []
    for strategy in ("bridge", "rendezvous", "icn"):
        full = World(with_strategy(data, strategy))
        report = full.run()
        got = _count_emissions(full)
        if got != expected:
            failures.append((strategy, "count", got, expected))
        video = [d.value for d in full.deliveries() if d.client == "video_app"]
        if video != [a["size"] for a in video_pubs]:
            failures.append((strategy, "video", video))
        # same scenario without the local video traffic must cost exactly as many federated messages
        stripped = json.loads(json.dumps(with_strategy(data, strategy)))
        stripped["clients"] = [c for c in stripped["clients"] if c["id"] != "video_app"]
        for c in stripped["clients"]:
            c["script"] = [a for a in c["script"] if a.get("topic") != "car_id/video"]
        base = World(stripped).run()
        extra = (report.inter_broker_msgs - base.inter_broker_msgs, report.control_msgs - base.control_msgs)
        if extra != (0, 0):
            failures.append((strategy, "federated video traffic", extra))
        details.append(f"{strategy}: counts {got}, video fed msgs {extra[0]}+{extra[1]}")
    return Outcome(not failures, f"expected {expected}; " + "; ".join(details), failures=failures)


# -- 5. strategy equivalence -------------------------------------------------


def _evaluated_twice(world: World) -> list:
    dups = []
    for b, proc in world.brokers.items():
        logs = [proc.node.evaluation_log, getattr(proc.node.strategy, "evaluation_log", [])]
        for log in logs:
            counts = Counter(log)
            dups += [(b, m) for m, n in counts.items() if n > 1]
    return dups


@_timed
def check_strategy_equivalence(n_scenarios: int = 50, seed0: int = 1000) -> Outcome:
    failures = []
    deliveries = 0
    for i in range(n_scenarios):
        data = oracles.random_scenario(seed0 + i)
        multisets = {}
        for strategy in ("bridge", "rendezvous", "icn"):
            world = World(with_strategy(data, strategy))
            world.run()
            multisets[strategy] = world.delivery_multiset()
            dups = _evaluated_twice(world)
            if dups:
                failures.append((data["name"], strategy, "msg evaluated twice", dups[:3]))
        if not multisets["bridge"] == multisets["rendezvous"] == multisets["icn"]:
            failures.append((data["name"], "delivery multisets differ",
                             {k: sum(v.values()) for k, v in multisets.items()}))
        deliveries += sum(multisets["bridge"].values())
    detail = f"{n_scenarios} scenarios, {deliveries} deliveries per strategy, {len(failures)} mismatches"
    return Outcome(not failures, detail, failures=failures[:5])


# -- 6. efficiency ordering --------------------------------------------------


def hand_count(name: str, strategy: str) -> int:
    """Link traversals for the shipped one-publisher/one-remote-subscriber scenarios, counted by hand.

    Triangle A-B-C, publisher at A, subscriber at C, k=1 RN is A.
      bridge: A->B, A->C, then B->C and C->B relays: 4 per publication.
      rendezvous: 1 SUB leg C->A, then 1 EMIT leg A->C per publication.
      icn: tree is the single edge A->C: 1 per publication.
    Star S with leaves L1..L4, publisher at L1, subscriber at L2, RN is S.
      bridge: L1->S then S->L2, S->L3, S->L4: 4 per publication.
      rendezvous: 1 SUB leg L2->S, then PUB L1->S and EMIT S->L2: 2 per publication.
      icn: L1->S->L2: 2 per publication.
    """
    data = scenario(name)
    n_pubs = sum(1 for c in data["clients"] for a in c["script"] if a["do"] == "publish")
    per_pub = {("triangle", "bridge"): 4, ("triangle", "rendezvous"): 1, ("triangle", "icn"): 1,
               ("star", "bridge"): 4, ("star", "rendezvous"): 2, ("star", "icn"): 2}[(name, strategy)]
    fixed = 1 if strategy == "rendezvous" else 0
    return fixed + per_pub * n_pubs


@_timed
def check_efficiency_ordering() -> Outcome:
    failures = []
    parts = []
    for name in ("triangle", "star"):
        data = scenario(name)
        counts = {}
        for strategy in ("bridge", "rendezvous", "icn"):
            report = World(with_strategy(data, strategy)).run()
            counts[strategy] = report.inter_broker_msgs
            if report.inter_broker_msgs != hand_count(name, strategy):
                failures.append((name, strategy, report.inter_broker_msgs, hand_count(name, strategy)))
        if not (counts["icn"] <= counts["rendezvous"] <= counts["bridge"] and counts["icn"] < counts["bridge"]):
            failures.append((name, "ordering", counts))
        parts.append(f"{name}: icn={counts['icn']} rendezvous={counts['rendezvous']} bridge={counts['bridge']}")
    return Outcome(not failures, "; ".join(parts), failures=failures)


# -- 7. RN selection ---------------------------------------------------------


def line_graph(n: int = 7) -> Topology:
    names = [f"N{i}" for i in range(n)]
    return Topology(names, [Edge(a, b, 1 + i % 3) for i, (a, b) in enumerate(zip(names, names[1:]))])


def star_graph(leaves: int = 5) -> Topology:
    names = ["A_hub"] + [f"L{i}" for i in range(leaves)]
    return Topology(names, [Edge("A_hub", f"L{i}", 2 + i) for i in range(leaves)])


def exhaustive_best(topology: Topology, weights: dict | None = None) -> set[str]:
    g = nx.Graph()
    g.add_nodes_from(topology.brokers)
    for e in topology.links.values():
        g.add_edge(e.a, e.b, weight=e.latency)
    dist = dict(nx.all_pairs_dijkstra_path_length(g))
    w = weights or {b: 1.0 for b in topology.brokers}
    costs = {c: sum(w.get(b, 0.0) * dist[b][c] for b in topology.brokers) for c in topology.brokers}
    best = min(costs.values())
    return {c for c, v in costs.items() if v == best}


@_timed
def check_rn_selection() -> Outcome:
    failures = []
    parts = []
    cases = [("line", line_graph(), None), ("star", star_graph(), None),
             ("line-weighted", line_graph(), {"N0": 5.0, "N6": 1.0}),
             ("star-weighted", star_graph(), {"L3": 9.0, "L1": 1.0})]
    for name, topo, weights in cases:
        (chosen,) = select_rendezvous_nodes(topo, 1, weights)
        best = exhaustive_best(topo, weights)
        if chosen not in best:
            failures.append((name, chosen, best))
        parts.append(f"{name}: {chosen}")
    return Outcome(not failures, "; ".join(parts), failures=failures)


# -- 8. admission ------------------------------------------------------------

_ADMISSION_EXPRS = [
    ("a/+", 0), ("$CNTPPL/cam", 10), ("$PROCESS/car/video", 25), ("$CNTPPL$PROCESS/x", 35),
    ("$DAILYAVG$CNTPPL/cam/+", 10), ("$PROCESS$PROCESS/v", 50), ("$HEAVY/x", 40), ("$BOGUS/x", None),
    ("bad//filter", None),
]


@_timed
def check_admission(n_ops: int = 10_000, seed: int = 8) -> Outcome:
    rng = random.Random(seed)
    from edgemesh.aggregation import CapabilityRegistry

    registry = CapabilityRegistry({"CNTPPL": 10, "PROCESS": 25})
    registry.register("HEAVY", 40, processor=len)
    node = BrokerNode("B", registry=registry, budget=100, host=ManualHost())
    clients = [f"c{i}" for i in range(8)]
    failures = []
    granted = rejected = 0
    for step in range(n_ops):
        client = rng.choice(clients)
        r = rng.random()
        before = node.used
        if r < 0.5:
            if client not in node.sessions:
                node.connect(client)
            text, cost = rng.choice(_ADMISSION_EXPRS)
            ack = node.subscribe(client, text, sub_id=rng.randint(1, 6))
            if ack.ok:
                granted += 1
                if cost is None:
                    failures.append((step, "granted invalid", text))
            else:
                rejected += 1
                if ack.reason == OVER_BUDGET and before + cost <= node.budget:
                    failures.append((step, "rejected although it fits", text, before))
        elif r < 0.8:
            session = node.sessions.get(client)
            if session and session.subscriptions:
                node.unsubscribe(client, rng.choice(sorted(session.subscriptions)))
        elif r < 0.95:
            node.disconnect(client, reason=rng.choice(["client", "handover"]))
        else:
            node.connect(client)  # takeover of an existing session
        if node.used != node.active_cost() or not 0 <= node.used <= node.budget:
            failures.append((step, "conservation", node.used, node.active_cost()))
            break
    detail = f"{n_ops} ops, {granted} grants, {rejected} rejections, final used {node.used}/{node.budget}"
    return Outcome(not failures, detail, failures=failures[:5])


# -- 9. determinism ----------------------------------------------------------


def scenario_names() -> list[str]:
    return sorted(p.stem for p in SCENARIOS.glob("*.json"))


@_timed
def check_determinism(out_dir: Path) -> Outcome:
    from edgemesh.cli import main

    failures = []
    runs = 0
    for name in scenario_names():
        for strategy in ("bridge", "rendezvous", "icn"):
            blobs = []
            for rep in range(2):
                out = out_dir / f"{name}-{strategy}-{rep}"
                code = main(["run", str(SCENARIOS / f"{name}.json"), "--strategy", strategy, "--out", str(out)])
                if code != 0:
                    failures.append((name, strategy, "exit", code))
                blobs.append(((out / "metrics.json").read_bytes(), (out / "links.csv").read_bytes()))
                runs += 1
            if blobs[0] != blobs[1]:
                failures.append((name, strategy, "metrics differ"))
    return Outcome(not failures, f"{runs} runs over {len(scenario_names())} scenarios, byte-identical pairs",
                   failures=failures)


# -- 10. qos 1 under loss ----------------------------------------------------


@_timed
def check_qos1_under_loss() -> Outcome:
    data = scenario("lossy_qos1")
    failures = []
    parts = []
    for strategy in ("bridge", "rendezvous", "icn"):
        world = World(with_strategy(data, strategy))
        report = world.run()
        lossy = [row for row in report.links if row["drop"] == 0.3]
        expected = sum(1 for c in data["clients"] for a in c["script"] if a["do"] == "publish")
        monitor = world.clients["monitor"]
        if report.qos1_emitted != expected or report.qos1_delivered != report.qos1_emitted:
            failures.append((strategy, report.qos1_emitted, report.qos1_delivered))
        if not lossy or lossy[0]["dropped"] == 0:
            failures.append((strategy, "no loss happened"))
        if report.duplicate_deliveries != monitor.duplicates:
            failures.append((strategy, "duplicates not reported"))
        if any(d.time > report.t_end for d in world.deliveries()):
            failures.append((strategy, "delivery after t_end"))
        parts.append(f"{strategy}: {report.qos1_delivered}/{report.qos1_emitted} delivered, "
                     f"{report.duplicate_deliveries} duplicates, {lossy[0]['dropped'] if lossy else 0} drops")
    return Outcome(not failures, "; ".join(parts), failures=failures)
