"""Relay-based overlay networking, simulated and verified.

All inter-process connections go through relays: process-owned sockets
with key-gated incoming connections and at most one outgoing connection.
The package bundles the self-stabilizing relay layer, a deterministic
discrete-event kernel to run it in, omniscient validity oracles for tests,
the three topology-transformation rules with a universal planner, and a
departure protocol demo built on nothing but the layer's primitives.
"""

from .core import (
    ActionInvocation,
    Header,
    InEntry,
    Key,
    Message,
    Relay,
    RelayId,
    RelayParameter,
    RelayRef,
    Rid,
    Transmit,
    belongs_to,
    rid_of,
)
from .kernel import (
    ProcessContext,
    RunResult,
    WorldState,
    adversarial_init,
    connect,
    connect_door,
    fig_triangle,
    give_door,
    new_world,
    random_connected_world,
)
from .layer import RelayLayer
from .oracle import (
    RelayGraph,
    WorldCheck,
    extract_relay_graph,
    fdp_legitimate,
    is_legal,
    process_components,
    stayers_connected,
    to_dot,
    valid_graph_cycle_free,
    valid_header,
    valid_relay,
    valid_relay_graph,
    valid_relay_parameter,
    weakly_connected_components,
)
from .rules import (
    ProcessMultigraph,
    TransformPlan,
    cpg,
    emulate_process_rule,
    execute_plan,
    plan_transform,
    relay_fusion,
    relay_introduction,
    relay_reversal,
)
from .departure import DepartureApp, build_departure_world, departure_tick, safe_to_stop

__all__ = [
    "ActionInvocation", "Header", "InEntry", "Key", "Message", "Relay",
    "RelayId", "RelayParameter", "RelayRef", "Rid", "Transmit",
    "belongs_to", "rid_of",
    "ProcessContext", "RunResult", "WorldState", "adversarial_init",
    "connect", "connect_door", "fig_triangle", "give_door", "new_world",
    "random_connected_world",
    "RelayLayer",
    "RelayGraph", "WorldCheck", "extract_relay_graph", "fdp_legitimate",
    "is_legal", "process_components", "stayers_connected", "to_dot",
    "valid_graph_cycle_free", "valid_header", "valid_relay",
    "valid_relay_graph", "valid_relay_parameter",
    "weakly_connected_components",
    "ProcessMultigraph", "TransformPlan", "cpg", "emulate_process_rule",
    "execute_plan", "plan_transform", "relay_fusion", "relay_introduction",
    "relay_reversal",
    "DepartureApp", "build_departure_world", "departure_tick", "safe_to_stop",
]
