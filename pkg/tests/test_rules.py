"""Rule macros, process-graph projection, emulation, transformation plans."""

from collections import Counter

import pytest

from relaysim import oracle, rules
from relaysim.core import Rid
from relaysim.kernel import connect, connect_door, give_door, new_world


def settled(world, budget=8000):
    res = world.run_until(lambda w: w.is_settled(), budget)
    assert res.reached
    return world


def one_component(world):
    return len(oracle.weakly_connected_components(oracle.extract_relay_graph(world))) == 1


# -- cpg -------------------------------------------------------------------


def test_cpg_single_pair():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1)])
    world = settled(rules.build_simple_realization(0, g))
    assert rules.cpg(world).edges == ((0, 1),)


def test_cpg_counts_parallel_edges():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1), (0, 1)])
    world = settled(rules.build_simple_realization(1, g))
    assert rules.cpg(world).edges == ((0, 1), (0, 1))


def test_cpg_matches_hand_count_on_triangle_without_indirect():
    world = new_world(2, 3)
    give_door(world, 1)
    connect_door(world, 2, 1)
    settled(world)
    assert rules.cpg(world).edges == ((2, 1),)


def test_cpg_rejects_indirect_relays():
    world = new_world(3, 3)
    mid = connect_door(world, 1, 2)
    connect(world, 0, mid.relay_id)
    settled(world)
    with pytest.raises(rules.PlanError):
        rules.cpg(world)


# -- introduction -------------------------------------------------------------


def test_introduction_adds_implicit_then_explicit_edge():
    world = new_world(4, 2)
    r = connect_door(world, 0, 1)
    layer = world.layer_of(0)
    s = layer.new_relay()
    vertices_before = len(oracle.extract_relay_graph(world).vertices)
    rules.relay_introduction(world, 0, r, s)
    g = oracle.extract_relay_graph(world)
    assert len(g.vertices) == vertices_before  # nothing removed
    assert any(a == (oracle.RELAY, r.relay_id) for a, b in g.implicit_edges)
    settled(world)
    created = [
        relay for relay in world.layer_of(1).relays.values() if relay.out_id == s.relay_id
    ]
    assert len(created) == 1 and created[0].level == 1


def test_introduction_received_relay_same_target_as_chain():
    world = new_world(5, 2)
    r = connect_door(world, 0, 1)
    layer = world.layer_of(0)
    s = layer.new_relay()
    rules.relay_introduction(world, 0, r, s)
    rules.relay_introduction(world, 0, r, s)
    settled(world)
    layer1 = world.layer_of(1)
    twins = [relay for relay in layer1.relays.values() if relay.out_id == s.relay_id]
    assert len(twins) == 2
    from relaysim.core import RelayRef

    assert layer1.same_target(RelayRef(twins[0].id), RelayRef(twins[1].id))


# -- fusion ---------------------------------------------------------------------


def test_fusion_merges_parallel_relays():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1), (0, 1)])
    world = settled(rules.build_simple_realization(6, g, shared_sinks=True))
    refs = [ref for _, ref in world.processes[0].store["edges"]]
    keys_before = set().union(
        *(world.layer_of(0).relays[r.relay_id].out_keys for r in refs)
    )
    merged = rules.relay_fusion(world, 0, refs[0], refs[1])
    assert merged is not None
    assert world.layer_of(0).relays[merged.relay_id].out_keys == keys_before
    settled(world)
    assert rules.cpg(world).edges == ((0, 1),)


def test_fusion_on_different_targets_is_noop():
    g = rules.ProcessMultigraph.of(range(3), [(0, 1), (0, 2)])
    world = settled(rules.build_simple_realization(7, g))
    refs = [ref for _, ref in world.processes[0].store["edges"]]
    assert rules.relay_fusion(world, 0, refs[0], refs[1]) is None
    assert rules.cpg(world).edges == ((0, 1), (0, 2))


# -- reversal ----------------------------------------------------------------------


def test_reversal_moves_edge_and_keeps_connectivity():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1)])
    world = settled(rules.build_simple_realization(8, g))
    (target, ref), = world.processes[0].store["edges"]
    s = world.layer_of(0).new_relay()
    assert one_component(world)
    assert rules.relay_reversal(world, 0, ref, s)
    assert one_component(world)  # implicit edge bridges the gap mid-flight
    settled(world)
    assert one_component(world)
    assert rules.cpg(world).edges == ((1, 0),)


def test_reversal_rejected_with_incoming_connections():
    world = new_world(9, 2)
    door = give_door(world, 0)
    connect(world, 1, door.relay_id)
    s = world.layer_of(0).new_relay()
    before = world.state_hash()
    assert not rules.relay_reversal(world, 0, door, s)
    assert world.state_hash() == before


# -- emulation ------------------------------------------------------------------------


def run_fragment(world, steps):
    init = {}
    for rid, layer in world.layers.items():
        for r in layer.relays.values():
            init[(rid.value, f"w{r.id.rid.value}_{r.id.serial}")] = r.id
    plan = rules.TransformPlan(steps, init)
    rules.execute_plan(world, plan)
    return world


def edge_slots(world):
    slots = {}
    for pid, proc in world.processes.items():
        for tgt, ref in proc.store.get("edges", []):
            slots.setdefault((pid, tgt), []).append(
                f"w{ref.relay_id.rid.value}_{ref.relay_id.serial}"
            )
    return slots


def test_emulated_introduction_delta():
    g = rules.ProcessMultigraph.of(range(3), [(0, 1), (0, 2)])
    world = settled(rules.build_simple_realization(10, g))
    slots = edge_slots(world)
    steps = rules.emulate_process_rule(
        "introduction",
        {"u": 0, "v": 1, "w": 2, "u_to_v": slots[(0, 1)][0], "u_to_w": slots[(0, 2)][0]},
    )
    before = Counter(rules.cpg(world).edges)
    run_fragment(world, steps)
    after = Counter(rules.cpg(world).edges)
    assert after - before == Counter({(1, 2): 1})
    assert before - after == Counter()


def test_emulated_delegation_delta():
    g = rules.ProcessMultigraph.of(range(3), [(0, 1), (0, 2)])
    world = settled(rules.build_simple_realization(11, g))
    slots = edge_slots(world)
    steps = rules.emulate_process_rule(
        "delegation",
        {"u": 0, "v": 1, "w": 2, "u_to_v": slots[(0, 1)][0], "u_to_w": slots[(0, 2)][0]},
    )
    before = Counter(rules.cpg(world).edges)
    run_fragment(world, steps)
    after = Counter(rules.cpg(world).edges)
    assert after - before == Counter({(1, 2): 1})
    assert before - after == Counter({(0, 2): 1})


def test_emulated_fusion_delta_on_parallel_edge():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1), (0, 1)])
    world = settled(rules.build_simple_realization(12, g, shared_sinks=True))
    slots = edge_slots(world)
    steps = rules.emulate_process_rule(
        "fusion",
        {"u": 0, "v": 1, "slot_a": slots[(0, 1)][0], "slot_b": slots[(0, 1)][1], "same_target": True},
    )
    before = Counter(rules.cpg(world).edges)
    run_fragment(world, steps)
    after = Counter(rules.cpg(world).edges)
    assert before - after == Counter({(0, 1): 1}) and after - before == Counter()


def test_emulated_reversal_delta():
    g = rules.ProcessMultigraph.of(range(2), [(0, 1)])
    world = settled(rules.build_simple_realization(13, g))
    slots = edge_slots(world)
    steps = rules.emulate_process_rule("reversal", {"u": 0, "v": 1, "u_to_v": slots[(0, 1)][0]})
    run_fragment(world, steps)
    assert rules.cpg(world).edges == ((1, 0),)


# -- planner ------------------------------------------------------------------------------


def transform_case(seed, src_edges, tgt_edges, n):
    src = rules.ProcessMultigraph.of(range(n), src_edges)
    tgt = rules.ProcessMultigraph.of(range(n), tgt_edges)
    world = settled(rules.build_simple_realization(seed, src))
    plan = rules.plan_transform(world, tgt)
    checks = []
    rules.execute_plan(world, plan, on_step=lambda w, i, s: checks.append(one_component(w)))
    assert all(checks)
    assert rules.cpg(world).edges == tgt.edges
    return plan


def test_path_to_star():
    transform_case(14, [(0, 1), (1, 2)], [(1, 0), (2, 0)], 3)


def test_identity_target_rebuilds_same_cpg():
    plan = transform_case(15, [(0, 1), (1, 2)], [(0, 1), (1, 2)], 3)
    assert plan.steps  # rebuilt, not skipped


def test_plan_contains_only_rule_steps():
    src = rules.ProcessMultigraph.of(range(4), [(0, 1), (1, 2), (2, 3)])
    tgt = rules.ProcessMultigraph.of(range(4), [(3, 0), (2, 0), (1, 0)])
    world = settled(rules.build_simple_realization(16, src))
    plan = rules.plan_transform(world, tgt)
    allowed = (rules.NewRelayStep, rules.IntroductionStep, rules.ReversalStep, rules.FusionStep)
    assert all(isinstance(s, allowed) for s in plan.steps)
    assert plan.to_lines()


def test_plan_eliminates_indirect_relays_first():
    world = new_world(17, 3)
    mid = connect_door(world, 1, 2)
    connect(world, 0, mid.relay_id)
    connect_door(world, 0, 1)
    settled(world)
    tgt = rules.ProcessMultigraph.of(range(3), [(0, 1), (1, 2)])
    plan = rules.plan_transform(world, tgt)
    rules.execute_plan(world, plan)
    assert rules.cpg(world).edges == tgt.edges


def test_plan_rejects_disconnected_target():
    src = rules.ProcessMultigraph.of(range(3), [(0, 1), (1, 2)])
    world = settled(rules.build_simple_realization(18, src))
    bad = rules.ProcessMultigraph.of(range(3), [(0, 1)])
    with pytest.raises(rules.PlanError):
        rules.plan_transform(world, bad)


def test_plan_rejects_self_loops():
    src = rules.ProcessMultigraph.of(range(2), [(0, 1)])
    world = settled(rules.build_simple_realization(19, src))
    bad = rules.ProcessMultigraph.of(range(2), [(0, 0), (0, 1)])
    with pytest.raises(rules.PlanError):
        rules.plan_transform(world, bad)


def test_phase_one_length_bounded_by_indirect_count():
    world = new_world(20, 4)
    mid = connect_door(world, 1, 2)
    far = connect(world, 0, mid.relay_id)
    connect(world, 3, far.relay_id)
    connect_door(world, 3, 0)
    settled(world)
    planner = rules._Planner(world)
    indirect = len(planner.indirect)
    planner.phase_eliminate_indirect()
    reversals = sum(1 for s in planner.steps if isinstance(s, rules.ReversalStep))
    assert reversals == indirect == 2
