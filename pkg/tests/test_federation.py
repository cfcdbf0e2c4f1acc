import itertools

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import harness
from edgemesh.aggregation import Publication
from edgemesh.federation import (
    BROADCAST,
    DeliveryTree,
    Edge,
    EmptySubscriberSet,
    FederatedMessage,
    RendezvousFunction,
    RendezvousRing,
    Topology,
    UnreachableRN,
    bridge_on_publish,
    build_delivery_tree,
    fnv1a64,
    from_icn_name,
    make_strategy,
    placement_cost,
    rn_for_topic,
    select_rendezvous_nodes,
    to_icn_name,
)
from edgemesh.grammar import parse_topic
from edgemesh.simnet import World


def fnv_reference(data: bytes) -> int:
    # written from the published FNV-1a definition, independent of the package
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


@pytest.mark.parametrize(
    "text, value",
    [("", 0xCBF29CE484222325), ("a", 0xAF63DC4C8601EC8C), ("foobar", 0x85944171F73967E8)],
)
def test_fnv_vectors(text, value):
    assert fnv1a64(text) == value


@given(st.binary(max_size=64))
def test_fnv_matches_reference(data):
    assert fnv1a64(data) == fnv_reference(data)


def test_rn_for_topic():
    ring = RendezvousRing(("B1", "B2"))
    expected = ("B1", "B2")[fnv_reference(b"cam1") % 2]
    assert rn_for_topic(ring, "cam1/video") == expected
    assert rn_for_topic(ring, parse_topic("cam1/other")) == expected
    assert rn_for_topic(ring, "+/location") == BROADCAST
    assert rn_for_topic(ring, "#") == BROADCAST
    assert {rn_for_topic(RendezvousRing(("X",)), f"t{i}/a") for i in range(20)} == {"X"}


def line(names, latency=1.0):
    return Topology(names, [Edge(a, b, latency) for a, b in zip(names, names[1:])])


def test_select_rn_line_and_full():
    topo = line(["A", "B", "C"])
    assert select_rendezvous_nodes(topo, 1) == ("B",)
    assert select_rendezvous_nodes(topo, 3) == ("A", "B", "C")
    assert placement_cost(topo, ("A", "B", "C")) == 0.0
    with pytest.raises(ValueError):
        select_rendezvous_nodes(topo, 0)


def test_select_rn_ties_break_to_lowest_id():
    topo = line(["A", "B"])
    assert select_rendezvous_nodes(topo, 1) == ("A",)


def test_rn_selection_acceptance_cases():
    out = harness.check_rn_selection()
    assert out.ok, out.failures


@st.composite
def graphs(draw):
    n = draw(st.integers(2, 7))
    names = [f"N{i}" for i in range(n)]
    edges = [(names[draw(st.integers(0, i - 1))], names[i]) for i in range(1, n)]
    for a, b in itertools.combinations(names, 2):
        if (a, b) not in edges and draw(st.booleans()):
            edges.append((a, b))
    return Topology(names, [Edge(a, b, draw(st.integers(1, 9))) for a, b in edges])


@given(graphs())
@settings(max_examples=80, deadline=None)
def test_shortest_paths_match_networkx(topo):
    g = nx.Graph()
    for e in topo.links.values():
        g.add_edge(e.a, e.b, weight=e.latency)
    lengths = dict(nx.all_pairs_dijkstra_path_length(g))
    for a in topo.brokers:
        for b in topo.brokers:
            assert topo.distance(a, b) == lengths[a][b]
            path = topo.path(a, b)
            assert path[0] == a and path[-1] == b
            assert sum(topo.latency(x, y) for x, y in zip(path, path[1:])) == lengths[a][b]


@given(graphs(), st.data())
@settings(max_examples=80, deadline=None)
def test_k1_selection_is_exhaustive_optimum(topo, data):
    weights = {b: float(data.draw(st.integers(0, 5))) for b in topo.brokers}
    if not any(weights.values()):
        weights[topo.brokers[0]] = 1.0
    (chosen,) = select_rendezvous_nodes(topo, 1, weights)
    best = harness.exhaustive_best(topo, weights)
    assert chosen == min(best)


@given(graphs(), st.data())
@settings(max_examples=60, deadline=None)
def test_delivery_tree_is_valid(topo, data):
    root = data.draw(st.sampled_from(topo.brokers))
    others = [b for b in topo.brokers if b != root]
    subs = data.draw(st.sets(st.sampled_from(others), min_size=1))
    tree = build_delivery_tree(topo, root, subs)
    g = nx.DiGraph(list(tree.edges))
    assert nx.is_arborescence(g)
    assert set(g.nodes) == set(tree.nodes)
    assert subs <= tree.nodes
    # every leaf is a subscriber: no dangling branches
    assert {n for n in g.nodes if g.out_degree(n) == 0} <= subs


def test_icn_tree_example():
    topo = Topology("ABCD", [Edge("A", "B", 1), Edge("B", "C", 1), Edge("B", "D", 1)])
    tree = build_delivery_tree(topo, "A", {"C", "D"})
    assert tree.edges == {("A", "B"), ("B", "C"), ("B", "D")}
    assert tree.children("B") == ["C", "D"]
    single = build_delivery_tree(topo, "A", {"C"})
    assert single.edges == {("A", "B"), ("B", "C")}
    with pytest.raises(EmptySubscriberSet):
        build_delivery_tree(topo, "A", {"A"})


def test_icn_names():
    assert to_icn_name("cars/7/location") == "/global/cars/7/location"
    assert from_icn_name("/local/car_id/video") == ("car_id/video", "local")


def test_rendezvous_function_refcounts():
    rf = RendezvousFunction()
    rf.register("a/+", "B1")
    rf.register("a/+", "B1")
    rf.register("#", "B2")
    rf.unregister("a/+", "B1")
    assert rf.resolve(parse_topic("a/x")) == {"B1", "B2"}
    rf.apply({"op": "remove", "filter": "a/+", "broker": "B1"})
    assert rf.resolve(parse_topic("a/x")) == {"B2"}
    assert rf.snapshot() == {"#": ["B2"]}


def test_bridge_hop_set():
    topo = line(["A", "B", "C"])
    pub = Publication(parse_topic("t"), b"", 0.0, "A", "A:1")
    ((peer, msg),) = bridge_on_publish(topo, "A", pub)
    assert peer == "B" and msg.hop_brokers == ("A",)
    ((peer, msg),) = bridge_on_publish(topo, "B", msg)
    assert peer == "C" and msg.hop_brokers == ("A", "B")
    assert bridge_on_publish(topo, "C", msg) == []
    with pytest.raises(ValueError):
        FederatedMessage("PUB", "A", ("A", "B", "A"))


def test_unknown_strategy():
    with pytest.raises(ValueError):
        make_strategy("gossip", line(["A"]))


def test_unreachable():
    topo = Topology(["A", "B"])
    with pytest.raises(UnreachableRN):
        topo.path("A", "B")
    assert not topo.is_connected()


# -- end-to-end legs in the simulator ---------------------------------------


def scenario(brokers, links, clients, **extra):
    return {"seed": 1, "t_end": 10_000, "brokers": brokers,
            "links": [{"a": a, "b": b, "latency": lat} for a, b, lat in links], "clients": clients, **extra}


def sub(cid, at, expr, **kw):
    return {"id": cid, "attach": at, "script": [{"at": 0, "do": "subscribe", "expr": expr, **kw}]}


def pub(cid, at, topic, when=3000, **kw):
    return {"id": cid, "attach": at, "script": [{"at": when, "do": "publish", "topic": topic, "payload": "1", **kw}]}


def run(data, strategy):
    world = World({**data, "strategy": strategy})
    return world.run(), world


def test_bridge_line_and_triangle_orderings():
    data = scenario(["A", "B", "C"], [("A", "B", 1), ("B", "C", 1)], [sub("s", "C", "t"), pub("p", "A", "t")])
    report, world = run(data, "bridge")
    assert report.inter_broker_msgs == 2 and report.deliveries == 1
    # B relays before A's direct copy reaches C: 3 traversals
    fast = scenario(["A", "B", "C"], [("A", "B", 1), ("B", "C", 1), ("A", "C", 10)],
                    [sub("s", "C", "t"), pub("p", "A", "t")])
    report, world = run(fast, "bridge")
    assert report.inter_broker_msgs == 3
    even = scenario(["A", "B", "C"], [("A", "B", 1), ("B", "C", 1), ("A", "C", 1)],
                    [sub("s", "C", "t"), pub("p", "A", "t")])
    report, world = run(even, "bridge")
    assert report.inter_broker_msgs == 4
    for w in (world,):
        assert harness._evaluated_twice(w) == []


def test_single_broker_has_no_federation():
    data = scenario(["A"], [], [sub("s", "A", "t"), pub("p", "A", "t")])
    for strategy in ("bridge", "rendezvous", "icn"):
        report, _ = run(data, strategy)
        assert report.inter_broker_msgs == 0 and report.deliveries == 1


def test_rendezvous_two_legs():
    data = scenario(["B1", "B2", "B3"], [("B1", "B2", 1), ("B2", "B3", 1)],
                    [sub("s", "B3", "cam1/#"), pub("p", "B1", "cam1/video")], rn_set=["B2"])
    report, world = run(data, "rendezvous")
    # one SUB leg, then PUB B1->B2 and EMIT B2->B3
    assert report.inter_broker_msgs == 3 and report.deliveries == 1
    assert world.brokers["B2"].node.strategy.evaluation_log == ["B1:3"]


def test_rendezvous_unmatched_publication_is_one_leg():
    data = scenario(["B1", "B2"], [("B1", "B2", 1)], [pub("p", "B1", "cam1/video")], rn_set=["B2"])
    report, _ = run(data, "rendezvous")
    assert report.inter_broker_msgs == 1


def test_rendezvous_subscriber_at_rn():
    data = scenario(["B1", "B2"], [("B1", "B2", 1)], [sub("s", "B2", "cam1/#"), pub("p", "B1", "cam1/v")],
                    rn_set=["B2"])
    report, _ = run(data, "rendezvous")
    assert report.inter_broker_msgs == 1 and report.deliveries == 1


def test_rendezvous_broadcast_filter_stubs_forward_to_designated():
    data = scenario(["B1", "B2", "B3"], [("B1", "B2", 1), ("B2", "B3", 1)],
                    [sub("s", "B3", "$COUNT/+/video"), pub("p1", "B1", "cam1/video"),
                     pub("p2", "B1", "cam2/video", when=4000), pub("p3", "B1", "zz/video", when=5000)],
                    rn_set=["B1", "B2"])
    report, world = run(data, "rendezvous")
    assert [d.value for d in world.deliveries()] == [1, 2, 3]
    designated = world.brokers["B1"].node.strategy
    assert all(not e.stub for e in designated.entries.values())


def test_icn_tree_in_simulation():
    data = scenario(["A", "B", "C", "D"], [("A", "B", 1), ("B", "C", 1), ("B", "D", 1)],
                    [sub("c", "C", "t"), sub("d", "D", "t"), pub("p", "A", "t")])
    icn, _ = run(data, "icn")
    bridge, _ = run(data, "bridge")
    assert icn.inter_broker_msgs == 3 and bridge.inter_broker_msgs >= 3
    assert icn.control_msgs == 2 * (1 + 4)


def test_icn_local_subscriber_only():
    data = scenario(["A", "B"], [("A", "B", 1)], [sub("s", "A", "t"), pub("p", "A", "t")])
    report, _ = run(data, "icn")
    assert report.inter_broker_msgs == 0 and report.deliveries == 1


@pytest.mark.parametrize("strategy", ["bridge", "rendezvous", "icn"])
def test_scope_rules_across_brokers(strategy):
    data = scenario(["A", "B"], [("A", "B", 1)], [
        sub("local_b", "B", "t", scope="local"),
        sub("local_a", "A", "t", scope="local"),
        sub("global_b", "B", "t"),
        pub("p", "A", "t"),
        pub("q", "A", "t", when=4000, scope="local"),
    ])
    report, world = run(data, strategy)
    got = sorted((d.client, d.time) for d in world.deliveries())
    assert [c for c, _ in got] == ["global_b", "local_a", "local_a"]


def test_equivalence_small():
    out = harness.check_strategy_equivalence(n_scenarios=5, seed0=77)
    assert out.ok, out.failures


def test_efficiency_ordering_hand_counts():
    out = harness.check_efficiency_ordering()
    assert out.ok, out.failures


def test_delivery_tree_type():
    tree = DeliveryTree("A", frozenset({("A", "B")}), frozenset({"B"}))
    assert tree.nodes == {"A", "B"}
