"""Graph extraction, validity properties, legality, components, export."""

from relaysim import oracle
from relaysim.core import (
    ActionInvocation,
    Header,
    InRelayClosed,
    OutRelayClosed,
    Ping,
    RelayParameter,
    Rid,
    Transmit,
    confirmed_entry,
    unconfirmed_entry,
)
from relaysim.kernel import (
    adversarial_init,
    connect,
    connect_door,
    fig_triangle,
    give_door,
    new_world,
)
from relaysim.oracle import PROCESS, RELAY


def test_triangle_graph_edges():
    world = fig_triangle()
    g = oracle.extract_relay_graph(world)
    q = world.processes[0].store["out"].relay_id
    r = world.processes[1].store["door"].relay_id
    p = world.processes[2].store["out"].relay_id
    expected = {
        ((PROCESS, 0), (RELAY, q)),
        ((RELAY, q), (RELAY, r)),
        ((PROCESS, 1), (RELAY, r)),
        ((RELAY, r), (PROCESS, 1)),
        ((PROCESS, 2), (RELAY, p)),
        ((RELAY, p), (RELAY, r)),
    }
    assert g.explicit_edges == expected
    assert g.implicit_edges == set()


def test_single_sink_graph():
    world = new_world(1, 1)
    give_door(world, 0)
    g = oracle.extract_relay_graph(world)
    assert len(g.vertices) == 2
    assert len(g.explicit_edges) == 2  # ownership and sink-delivery arcs


def test_reference_in_buffer_is_implicit_edge():
    world = new_world(2, 2)
    via = connect_door(world, 0, 1)
    layer = world.layer_of(0)
    s = layer.new_relay()
    world.ctx(0).send(via, "meet", (s,), relay_positions=(0,))
    g = oracle.extract_relay_graph(world)
    assert ((RELAY, via.relay_id), (RELAY, s.relay_id)) in g.implicit_edges


def test_fresh_sink_is_valid():
    world = new_world(3, 1)
    ref = world.layer_of(0).new_relay()
    ok, violations = oracle.valid_relay(world, ref.relay_id)
    assert ok, violations


def test_dead_next_hop_violates_validity():
    world = new_world(4, 2)
    ref = connect_door(world, 0, 1)
    door_id = world.processes[1].store["door"].relay_id
    world.layer_of(1).relays[door_id].state = "dead"
    ok, violations = oracle.valid_relay(world, ref.relay_id)
    assert not ok and "P11b" in violations


def test_wrong_level_violates_validity():
    world = new_world(5, 2)
    ref = connect_door(world, 0, 1)
    world.layer_of(0).relays[ref.relay_id].level = 3
    ok, violations = oracle.valid_relay(world, ref.relay_id)
    assert not ok and "P11c" in violations


def test_duplicate_in_key_violates_p5():
    world = new_world(6, 2)
    layer = world.layer_of(0)
    a, b = layer.new_relay(), layer.new_relay()
    key = layer.mint_key()
    layer.relays[a.relay_id].in_set.add(confirmed_entry(key, Rid(1)))
    layer.relays[b.relay_id].in_set.add(confirmed_entry(key, Rid(1)))
    assert "P5" in oracle.valid_relay(world, a.relay_id)[1]
    assert "P5" in oracle.valid_relay(world, b.relay_id)[1]


def test_contradicting_ping_violates_p6():
    world = new_world(7, 2)
    door = give_door(world, 0)
    layer = world.layer_of(0)
    layer._emit_control(Rid(1), Ping(door.relay_id, 3, Rid(0), layer.mint_key()))
    ok, violations = oracle.valid_relay(world, door.relay_id)
    assert not ok and "P6" in violations


def test_out_relay_closed_in_flight_violates_p7():
    world = new_world(8, 2)
    door = give_door(world, 0)
    world.layer_of(1)._emit_control(Rid(0), OutRelayClosed(door.relay_id))
    ok, violations = oracle.valid_relay(world, door.relay_id)
    assert not ok and "P7" in violations


def test_unbacked_pending_entry_violates_p9():
    world = new_world(9, 2)
    layer = world.layer_of(0)
    via = connect_door(world, 0, 1)
    s = layer.new_relay()
    layer.relays[s.relay_id].in_set.add(unconfirmed_entry(layer.mint_key(), via.relay_id))
    ok, violations = oracle.valid_relay(world, s.relay_id)
    assert not ok and "P9" in violations


def test_sink_with_foreign_sink_rid_violates_p10():
    world = new_world(10, 2)
    door = give_door(world, 0)
    world.layer_of(0).relays[door.relay_id].sink_rid = Rid(1)
    ok, violations = oracle.valid_relay(world, door.relay_id)
    assert not ok and "P10" in violations


def test_in_relay_closed_matching_keys_violates_p11f():
    world = new_world(11, 2)
    ref = connect_door(world, 0, 1)
    layer = world.layer_of(0)
    relay = layer.relays[ref.relay_id]
    layer._emit_control(Rid(1), InRelayClosed(frozenset(relay.out_keys), Rid(0), relay.out_id))
    ok, violations = oracle.valid_relay(world, ref.relay_id)
    assert not ok and "P11f" in violations


def test_valid_header_confirmed_and_unconfirmed_clauses():
    world = new_world(12, 2)
    door_ref = give_door(world, 1)
    sender = connect_door(world, 0, 1)
    layer1 = world.layer_of(1)
    door = layer1.relays[door_ref.relay_id]
    key = next(iter(door.in_set)).key
    good = Transmit(Header(key, sender.relay_id, door.id, 1), ActionInvocation("x", ()))
    assert oracle.valid_header(world, good, door.id)
    stranger = Transmit(Header(key, world.layer_of(1).mint_relay_id(), door.id, 1), ActionInvocation("x", ()))
    assert not oracle.valid_header(world, stranger, door.id)

    # unconfirmed clause: announcing relay's sink must match the sender
    layer0 = world.layer_of(0)
    s = layer0.new_relay()
    world.ctx(0).send(sender, "meet", (s,), relay_positions=(0,))
    entry = next(iter(layer0.relays[s.relay_id].in_set))
    incoming = Transmit(
        Header(entry.key, world.layer_of(1).mint_relay_id(), s.relay_id, 1),
        ActionInvocation("x", ()),
    )
    assert oracle.valid_header(world, incoming, s.relay_id)


def test_parameter_valid_when_minted_and_across_forwarding():
    world = new_world(13, 3)
    mid = connect_door(world, 1, 2)
    far = connect(world, 0, mid.relay_id)
    layer0 = world.layer_of(0)
    s = layer0.new_relay()
    world.ctx(0).send(far, "meet", (s,), relay_positions=(0,))
    chk = oracle.WorldCheck(world)
    assert chk.params, "expected an in-flight parameter"
    carrier, message, param = chk.params[0]
    ok, violations = oracle.valid_relay_parameter(world, carrier, param)
    assert ok, violations
    # one delivery hop: the message moves into the middle relay's buffer
    world.layers[Rid(1)].handle_transmit(message)
    world.layer_of(0).relays[far.relay_id].buf.clear()
    chk2 = oracle.WorldCheck(world)
    stored = [(c, p) for c, m, p in chk2.params if p.key == param.key]
    assert stored and stored[0][0] == mid.relay_id
    ok2, violations2 = oracle.valid_relay_parameter(world, mid.relay_id, param)
    assert ok2, violations2


def test_parameter_with_existing_out_key_violates_c7():
    world = new_world(14, 2)
    via = connect_door(world, 0, 1)
    layer = world.layer_of(0)
    s = layer.new_relay()
    world.ctx(0).send(via, "meet", (s,), relay_positions=(0,))
    chk = oracle.WorldCheck(world)
    carrier, message, param = chk.params[0]
    ghost = layer.new_relay()
    layer.relays[ghost.relay_id].out_id = via.relay_id
    layer.relays[ghost.relay_id].out_keys = {param.key}
    layer.relays[ghost.relay_id].level = 2
    ok, violations = oracle.valid_relay_parameter(world, carrier, param)
    assert not ok and "C7" in violations


def test_legal_worlds_and_counterexample():
    world = new_world(15, 3)
    connect_door(world, 0, 1)
    connect_door(world, 1, 2)
    assert oracle.is_legal(world)
    layer = world.layer_of(0)
    bad = layer.new_relay()
    layer.relays[bad.relay_id].out_id = world.layer_of(1).mint_relay_id()
    layer.relays[bad.relay_id].level = 1
    assert not oracle.is_legal(world)


def test_legal_world_valid_graph_cycle_free():
    world = fig_triangle()
    assert oracle.is_legal(world)
    assert oracle.valid_graph_cycle_free(world)


def test_valid_subgraph_is_subset_of_graph():
    world = adversarial_init(16, 4, 12, 10, "mixed")
    full = oracle.extract_relay_graph(world)
    valid = oracle.valid_relay_graph(world)
    assert valid.vertices <= full.vertices
    assert valid.explicit_edges <= full.explicit_edges


def test_levels_strictly_decrease_in_valid_graph():
    world = new_world(17, 3)
    mid = connect_door(world, 1, 2)
    connect(world, 0, mid.relay_id)
    chk = oracle.WorldCheck(world)
    for relay in chk.relays.values():
        if relay.out_id and chk.relay_valid(relay.id) and chk.relay_valid(relay.out_id):
            assert relay.level == chk.relays[relay.out_id].level + 1


def test_triangle_is_one_component():
    world = fig_triangle()
    comps = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    assert comps == [[0, 1, 2]]


def test_isolated_processes_are_singletons():
    world = new_world(18, 2)
    give_door(world, 0)
    give_door(world, 1)
    comps = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    assert comps == [[0], [1]]


def test_oracle_calls_do_not_mutate_state():
    world = adversarial_init(19, 4, 12, 12, "mixed")
    before = world.state_hash()
    oracle.is_legal(world)
    oracle.extract_relay_graph(world)
    oracle.valid_relay_graph(world)
    oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    oracle.valid_graph_cycle_free(world)
    assert world.state_hash() == before


def test_fdp_legitimate_clauses():
    world = new_world(20, 3)
    connect_door(world, 0, 1)
    connect_door(world, 1, 2)
    initial = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    assert oracle.fdp_legitimate(world, initial)  # nobody leaving
    world.processes[2].leaving = True
    assert not oracle.fdp_legitimate(world, initial)  # leaver still active
    world.ctx(2).stop()
    res = world.run_until(lambda w: oracle.fdp_legitimate(w, initial), 8000)
    assert res.reached


def test_dot_export_shape():
    world = fig_triangle()
    dot = oracle.to_dot(world)
    assert dot.startswith("digraph")
    assert dot.count("shape=box") == 3
    assert dot.count("shape=ellipse") == 3
    assert dot.count("->") == 6
    assert dot.rstrip().endswith("}")


def test_dot_export_empty_world():
    world = new_world(21, 0)
    dot = oracle.to_dot(world)
    assert dot.splitlines()[0] == "digraph relays {"
