"""Federated pub/sub edge brokers with in-network aggregation and a deterministic network simulator."""

from .aggregation import (
    AggregationState,
    CapabilityRegistry,
    Emission,
    Publication,
    WindowId,
    apply_processing,
    apply_spatial,
    apply_temporal,
    eval_pipeline,
    eval_predicate,
    window_of,
)
from .broker import BrokerNode, ManualHost, SubAck
from .federation import (
    BROADCAST,
    RendezvousRing,
    Topology,
    build_delivery_tree,
    fnv1a64,
    rn_for_topic,
    select_rendezvous_nodes,
)
from .grammar import matches, parse_filter, parse_subscription, parse_topic, render_subscription
from .simnet import MetricsReport, Simulator, World, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AggregationState", "BROADCAST", "BrokerNode", "CapabilityRegistry", "Emission", "ManualHost",
    "MetricsReport", "Publication", "RendezvousRing", "Simulator", "SubAck", "Topology", "WindowId",
    "World", "apply_processing", "apply_spatial", "apply_temporal", "build_delivery_tree", "eval_pipeline",
    "eval_predicate", "fnv1a64", "matches", "parse_filter", "parse_subscription", "parse_topic",
    "render_subscription", "rn_for_topic", "run_scenario", "select_rendezvous_nodes", "window_of",
]
