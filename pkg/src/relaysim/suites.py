"""Property suites: seeded, reproducible checks of every guarantee the
relay layer makes, at desk scale.

Each suite returns a report with one summary line per property and carries
the cycle-freeness tally of every state it sampled through the oracle.
Suites are deterministic: identical seeds produce byte-identical traces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from multiprocessing import Pool, cpu_count

from . import oracle, rules
from .apps import DeliveryTracker, RandomDeliberateApp
from .departure import build_departure_world
from .kernel import WorldState, adversarial_init, random_connected_world

FAIRNESS_BOUND = 64
CLOSURE_STEPS = 10_000
CLOSURE_WINDOW = 10 * FAIRNESS_BOUND


@dataclass
class SuiteReport:
    name: str
    passed: bool
    lines: list
    cycle_checks: int = 0
    cycle_violations: int = 0
    trace: str = ""


@dataclass
class _CycleTally:
    checks: int = 0
    violations: int = 0

    def sample(self, world: WorldState, check=None) -> None:
        self.checks += 1
        if not oracle.valid_graph_cycle_free(world, check):
            self.violations += 1


def _pool_map(fn, args):
    workers = min(2, cpu_count() or 1)
    if workers < 2 or len(args) < 4:
        return [fn(a) for a in args]
    with Pool(workers) as pool:
        return pool.map(fn, args, chunksize=max(1, len(args) // (workers * 4)))


# ---------------------------------------------------------------------------
# 1. Delivery: payloads sent via oracle-valid relays always reach the
#    process the relay sinks at.


def _delivery_run(seed: int) -> dict:
    world = random_connected_world(seed, 4, extra_edges=2, chains=1)
    tracker = DeliveryTracker(world)
    apps = []
    for pid in world.processes:
        app = RandomDeliberateApp(tracker=tracker, max_relays=4)
        world.processes[pid].app = app
        apps.append(app)
    world.trace = []
    world.run(1500)
    for app in apps:
        app.frozen = True
    world.run_until(lambda w: not tracker.undelivered_valid(), 40_000)
    tally = _CycleTally()
    tally.sample(world)
    return {
        "seed": seed,
        "undelivered": len(tracker.undelivered_valid()),
        "misdelivered": len(tracker.misdelivered()),
        "tracked": len(tracker.sent),
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "trace": "\n".join(world.trace),
        "hash": world.state_hash(),
    }


def run_delivery(runs: int = 100, seed_base: int = 100) -> SuiteReport:
    results = _pool_map(_delivery_run, [seed_base + i for i in range(runs)])
    undelivered = sum(r["undelivered"] for r in results)
    misdelivered = sum(r["misdelivered"] for r in results)
    tracked = sum(r["tracked"] for r in results)
    passed = undelivered == 0 and misdelivered == 0 and tracked > 0
    return SuiteReport(
        "delivery",
        passed,
        [
            f"criterion=delivery runs={len(results)} tracked_sends={tracked} "
            f"undelivered={undelivered} misdelivered={misdelivered} pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["trace"] + "\n" + r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 2. Closure: from a legal state under a deliberate application, every
#    reachable state is legal.


def _closure_run(seed: int) -> dict:
    world = random_connected_world(seed, 3, extra_edges=1, chains=0)
    for pid in world.processes:
        world.processes[pid].app = RandomDeliberateApp(max_relays=3)
    violations = 0
    tally = _CycleTally()
    if not oracle.is_legal(world):
        violations += 1
    for step in range(CLOSURE_STEPS):
        world.step()
        check = oracle.WorldCheck(world)
        if not check.is_legal():
            violations += 1
        if step % 500 == 0:
            tally.sample(world, check)
    return {
        "seed": seed,
        "violations": violations,
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "hash": world.state_hash(),
    }


def run_closure(runs: int = 100, seed_base: int = 300) -> SuiteReport:
    results = _pool_map(_closure_run, [seed_base + i for i in range(runs)])
    violations = sum(r["violations"] for r in results)
    passed = violations == 0
    return SuiteReport(
        "closure",
        passed,
        [
            f"criterion=closure runs={len(results)} steps_each={CLOSURE_STEPS} "
            f"illegal_states={violations} pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 3. Convergence: any finitely corrupted start reaches a legal state within
#    budget and stays legal through a closure window.


def _convergence_run(seed: int) -> dict:
    world = adversarial_init(seed, 4, 12, 15, "mixed", fairness_bound=FAIRNESS_BOUND)
    for pid in world.processes:
        world.processes[pid].app = RandomDeliberateApp(max_relays=4)
    res = world.run_until(oracle.is_legal, 60_000)
    tally = _CycleTally()
    flicker = 0
    if res.reached:
        for _ in range(CLOSURE_WINDOW):
            world.step()
            if not oracle.is_legal(world):
                flicker += 1
        tally.sample(world)
    return {
        "seed": seed,
        "converged": res.reached,
        "steps": res.steps,
        "flicker": flicker,
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "hash": world.state_hash(),
    }


def run_convergence(runs: int = 200, seed_base: int = 500) -> SuiteReport:
    results = _pool_map(_convergence_run, [seed_base + i for i in range(runs)])
    converged = sum(1 for r in results if r["converged"])
    flicker = sum(r["flicker"] for r in results)
    worst = max(r["steps"] for r in results)
    passed = converged == len(results) and flicker == 0
    return SuiteReport(
        "convergence",
        passed,
        [
            f"criterion=convergence runs={len(results)} converged={converged} "
            f"max_steps={worst} window={CLOSURE_WINDOW} window_violations={flicker} "
            f"pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 4. Shutdown: once every process has stopped, no relay layer survives.


def _shutdown_run(seed: int) -> dict:
    world = random_connected_world(seed, 5, extra_edges=3, chains=2)
    for pid in world.processes:
        world.processes[pid].app = RandomDeliberateApp(send_refs="never", max_relays=3)
    world.run(300)
    for pid in sorted(world.processes):
        world.processes[pid].app = None
        world.run(10)
        world.ctx(pid).stop()
    res = world.run_until(lambda w: not w.layers, 60_000)
    return {"seed": seed, "survivors": len(world.layers), "steps": res.steps, "hash": world.state_hash()}


def run_shutdown(runs: int = 100, seed_base: int = 900) -> SuiteReport:
    results = _pool_map(_shutdown_run, [seed_base + i for i in range(runs)])
    survivors = sum(r["survivors"] for r in results)
    passed = survivors == 0
    return SuiteReport(
        "shutdown",
        passed,
        [
            f"criterion=shutdown runs={len(results)} surviving_layers={survivors} "
            f"pass={'yes' if passed else 'no'}"
        ],
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 5. Connectivity preservation: each rule application keeps the processes
#    weakly connected.


def _applicable_rules(world: WorldState, rng: random.Random):
    """All rule instances whose preconditions hold right now."""
    out = []
    for pid in sorted(world.processes):
        layer = world.layer_of(pid)
        if layer is None:
            continue
        refs = layer.get_relays()
        non_sink = [r for r in refs if not layer.is_sink(r)]
        for i, r in enumerate(non_sink):
            for s in refs:
                if s != r:
                    out.append(("introduction", pid, r, s))
            for s in non_sink[i + 1:]:
                if layer.same_target(r, s) and layer.incoming(r) == 0 and layer.incoming(s) == 0:
                    out.append(("fusion", pid, r, s))
            if layer.incoming(r) == 0:
                for s in refs:
                    if s != r:
                        out.append(("reversal", pid, r, s))
    return out


def _connectivity_run(args) -> dict:
    seed, applications = args
    rng = random.Random(seed)
    world = random_connected_world(seed, 3 + seed % 4, extra_edges=2, chains=1)
    world.run_until(lambda w: w.is_settled(), 8_000)
    bad = 0
    applied = 0
    tally = _CycleTally()
    for _ in range(applications):
        if len(oracle.weakly_connected_components(oracle.extract_relay_graph(world))) != 1:
            bad += 1
            break
        candidates = _applicable_rules(world, rng)
        if not candidates:
            break
        kind, pid, r, s = candidates[rng.randrange(len(candidates))]
        if kind == "introduction":
            rules.relay_introduction(world, pid, r, s)
        elif kind == "fusion":
            rules.relay_fusion(world, pid, r, s)
        else:
            rules.relay_reversal(world, pid, r, s)
        applied += 1
        world.run_until(lambda w: w.is_settled(), 8_000)
        if len(oracle.weakly_connected_components(oracle.extract_relay_graph(world))) != 1:
            bad += 1
            break
    tally.sample(world)
    return {
        "seed": seed,
        "applied": applied,
        "violations": bad,
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "hash": world.state_hash(),
    }


def run_connectivity(applications: int = 1000, seed_base: int = 1200) -> SuiteReport:
    per_world = 10
    worlds = (applications + per_world - 1) // per_world
    results = _pool_map(_connectivity_run, [(seed_base + i, per_world) for i in range(worlds)])
    applied = sum(r["applied"] for r in results)
    violations = sum(r["violations"] for r in results)
    passed = violations == 0 and applied >= applications * 0.9
    return SuiteReport(
        "connectivity",
        passed,
        [
            f"criterion=connectivity applications={applied} "
            f"disconnections={violations} pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 6. Universality: any weakly connected topology transforms into any other.


def _universality_run(seed: int) -> dict:
    n = 3 + seed % 4
    source = rules.random_multigraph(seed * 2 + 1, n, extra=2)
    target = rules.random_multigraph(seed * 2 + 2, n, extra=2)
    world = rules.build_simple_realization(seed, source)
    world.run_until(lambda w: w.is_settled(), 8_000)
    plan = rules.plan_transform(world, target)
    disconnections = []

    def on_step(w, i, step):
        comps = oracle.weakly_connected_components(oracle.extract_relay_graph(w))
        if len(comps) != 1:
            disconnections.append(i)

    rules.execute_plan(world, plan, on_step=on_step)
    final = rules.cpg(world)
    tally = _CycleTally()
    tally.sample(world)
    return {
        "seed": seed,
        "match": final.edges == target.edges,
        "disconnections": len(disconnections),
        "plan_len": len(plan.steps),
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "hash": world.state_hash(),
    }


def run_universality(runs: int = 50, seed_base: int = 1400) -> SuiteReport:
    results = _pool_map(_universality_run, [seed_base + i for i in range(runs)])
    matches = sum(1 for r in results if r["match"])
    disconnections = sum(r["disconnections"] for r in results)
    passed = matches == len(results) and disconnections == 0
    return SuiteReport(
        "universality",
        passed,
        [
            f"criterion=universality pairs={len(results)} matched={matches} "
            f"disconnections={disconnections} pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 7. Emulation: the rule set reproduces each classical process rule's exact
#    effect on the process graph.


def _emulation_case(args) -> dict:
    rule, seed = args
    for attempt in range(8):
        result = _emulation_attempt(rule, seed * 131 + attempt)
        if not result.get("skipped"):
            return result
    return result


def _emulation_attempt(rule: str, seed: int) -> dict:
    from collections import Counter as C

    rng = random.Random(seed)
    n = 3 + seed % 3
    if rule == "fusion":
        shared = seed % 2 == 0
        graph = rules.random_multigraph(seed, n, extra=1)
        u, v = sorted(graph.edges)[rng.randrange(len(graph.edges))]
        graph = rules.ProcessMultigraph.of(graph.processes, list(graph.edges) + [(u, v)])
        world = rules.build_simple_realization(seed, graph, shared_sinks=shared)
    else:
        graph = rules.random_multigraph(seed, n, extra=1, allow_parallel=False)
        world = rules.build_simple_realization(seed, graph)
    world.run_until(lambda w: w.is_settled(), 8_000)

    slots = {}
    for pid, proc in world.processes.items():
        for tgt, ref in proc.store.get("edges", []):
            name = f"w{ref.relay_id.rid.value}_{ref.relay_id.serial}"
            slots.setdefault((pid, tgt), []).append(name)
    init = {}
    for rid, layer in world.layers.items():
        for r in layer.relays.values():
            init[(rid.value, f"w{r.id.rid.value}_{r.id.serial}")] = r.id

    before = C(rules.cpg(world).edges)

    if rule == "introduction":
        cands = [(u, v, w) for (u, v) in slots for (u2, w) in slots if u2 == u and w != v]
        if not cands:
            return {"ok": True, "skipped": True}
        u, v, w = sorted(cands)[rng.randrange(len(cands))]
        steps = rules.emulate_process_rule(
            "introduction", {"u": u, "v": v, "w": w, "u_to_v": slots[(u, v)][0], "u_to_w": slots[(u, w)][0]}
        )
        expected_add, expected_del = C({(v, w): 1}), C()
    elif rule == "delegation":
        cands = [(u, v, w) for (u, v) in slots for (u2, w) in slots if u2 == u and w != v and u != v and u != w]
        if not cands:
            return {"ok": True, "skipped": True}
        u, v, w = sorted(cands)[rng.randrange(len(cands))]
        steps = rules.emulate_process_rule(
            "delegation", {"u": u, "v": v, "w": w, "u_to_v": slots[(u, v)][0], "u_to_w": slots[(u, w)][0]}
        )
        expected_add, expected_del = C({(v, w): 1}), C({(u, w): 1})
    elif rule == "fusion":
        pair = next(((u, v) for (u, v), names in slots.items() if len(names) >= 2), None)
        if pair is None:
            return {"ok": True, "skipped": True}
        u, v = pair
        same = world.layer_of(u).same_target(
            _ref_of(world, u, slots[pair][0]), _ref_of(world, u, slots[pair][1])
        )
        steps = rules.emulate_process_rule(
            "fusion", {"u": u, "v": v, "slot_a": slots[pair][0], "slot_b": slots[pair][1], "same_target": same}
        )
        expected_add, expected_del = C(), C({(u, v): 1})
    else:
        pair = sorted(slots)[rng.randrange(len(slots))]
        u, v = pair
        steps = rules.emulate_process_rule("reversal", {"u": u, "v": v, "u_to_v": slots[pair][0]})
        expected_add, expected_del = C({(v, u): 1}), C({(u, v): 1})

    plan = rules.TransformPlan(steps, init)
    rules.execute_plan(world, plan)
    after = C(rules.cpg(world).edges)
    ok = (after - before) == expected_add and (before - after) == expected_del
    return {"ok": ok, "skipped": False, "rule": rule, "seed": seed}


def _ref_of(world: WorldState, pid: int, slot: str):
    from .core import RelayId, RelayRef, Rid

    _, rest = slot.split("w", 1)
    rid_v, serial = rest.split("_")
    return RelayRef(RelayId(Rid(int(rid_v)), int(serial)))


def run_emulation(per_rule: int = 25, seed_base: int = 1600) -> SuiteReport:
    cases = [
        (rule, seed_base + i)
        for rule in ("introduction", "delegation", "fusion", "reversal")
        for i in range(per_rule)
    ]
    results = _pool_map(_emulation_case, cases)
    failed = [r for r in results if not r["ok"]]
    executed = sum(1 for r in results if not r.get("skipped"))
    passed = not failed and executed == len(cases)
    return SuiteReport(
        "emulation",
        passed,
        [
            f"criterion=emulation cases={len(cases)} executed={executed} "
            f"delta_mismatches={len(failed)} pass={'yes' if passed else 'no'}"
        ],
    )


# ---------------------------------------------------------------------------
# 8. Departure demo: leavers stop, stayers stay connected throughout.


def _fdp_run(seed: int) -> dict:
    rng = random.Random(seed)
    n = 4 + seed % 5
    edges = [(i, rng.randrange(i)) for i in range(1, n)]
    for _ in range(2):
        u, v = rng.randrange(n), rng.randrange(n)
        if u != v:
            edges.append((u, v))
    leaving = rng.sample(range(n), 1 + seed % 3)
    world = build_departure_world(seed, n, edges, leaving)
    initial = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    reached = False
    safety_violations = 0
    for _ in range(40_000):
        if oracle.fdp_legitimate(world, initial):
            reached = True
            break
        if not oracle.stayers_connected(world, initial):
            safety_violations += 1
            break
        world.step()
    tally = _CycleTally()
    tally.sample(world)
    return {
        "seed": seed,
        "reached": reached,
        "safety_violations": safety_violations,
        "cycle_checks": tally.checks,
        "cycle_violations": tally.violations,
        "hash": world.state_hash(),
    }


def run_fdp(runs: int = 100, seed_base: int = 1800) -> SuiteReport:
    results = _pool_map(_fdp_run, [seed_base + i for i in range(runs)])
    reached = sum(1 for r in results if r["reached"])
    safety = sum(r["safety_violations"] for r in results)
    passed = reached == len(results) and safety == 0
    return SuiteReport(
        "fdp",
        passed,
        [
            f"criterion=fdp runs={len(results)} reached_legitimate={reached} "
            f"safety_violations={safety} pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=sum(r["cycle_checks"] for r in results),
        cycle_violations=sum(r["cycle_violations"] for r in results),
        trace="\n".join(r["hash"] for r in results),
    )


# ---------------------------------------------------------------------------
# 9. Cycle-freeness of the valid relay graph, across a mixed state sweep.


def _cycle_run(seed: int) -> dict:
    tally = _CycleTally()
    world = adversarial_init(seed, 4, 12, 15, "mixed")
    for _ in range(40):
        tally.sample(world)
        world.run(25)
    world2 = random_connected_world(seed, 4, extra_edges=2, chains=1)
    for pid in world2.processes:
        world2.processes[pid].app = RandomDeliberateApp(max_relays=4)
    for _ in range(40):
        tally.sample(world2)
        world2.run(25)
    return {"checks": tally.checks, "violations": tally.violations}


def run_cycle_freeness(runs: int = 40, seed_base: int = 2100) -> SuiteReport:
    results = _pool_map(_cycle_run, [seed_base + i for i in range(runs)])
    checks = sum(r["checks"] for r in results)
    violations = sum(r["violations"] for r in results)
    passed = violations == 0 and checks > 0
    return SuiteReport(
        "cycle_freeness",
        passed,
        [
            f"criterion=cycle_freeness sampled_states={checks} directed_cycles={violations} "
            f"pass={'yes' if passed else 'no'}"
        ],
        cycle_checks=checks,
        cycle_violations=violations,
    )


# ---------------------------------------------------------------------------
# 10. Determinism: same seeds, byte-identical traces.


def run_determinism(runs: int = 12, seed_base: int = 100) -> SuiteReport:
    first = run_delivery(runs=runs, seed_base=seed_base)
    second = run_delivery(runs=runs, seed_base=seed_base)
    identical = first.trace == second.trace and first.trace != ""
    third = run_convergence(runs=10, seed_base=500)
    fourth = run_convergence(runs=10, seed_base=500)
    identical = identical and third.trace == fourth.trace
    return SuiteReport(
        "determinism",
        identical,
        [
            f"criterion=determinism reruns=2 trace_bytes={len(first.trace)} "
            f"identical={'yes' if identical else 'no'} pass={'yes' if identical else 'no'}"
        ],
    )


SUITES = {
    "delivery": run_delivery,
    "closure": run_closure,
    "convergence": run_convergence,
    "shutdown": run_shutdown,
    "connectivity": run_connectivity,
    "universality": run_universality,
    "emulation": run_emulation,
    "fdp": run_fdp,
    "cycle_freeness": run_cycle_freeness,
    "determinism": run_determinism,
}


def run_suite(name: str) -> SuiteReport:
    return SUITES[name]()


def run_all() -> list:
    return [run_suite(name) for name in SUITES]
