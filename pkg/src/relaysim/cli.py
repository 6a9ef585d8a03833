"""Batch harness: run scenario files, transform topologies, drive suites.

Scenario files are JSON.  Reports are line-oriented ``key=value`` text so
golden runs diff cleanly.  Exit codes: 0 success, 2 parse error, 3 step
budget exhausted, 4 oracle violation.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from . import oracle, rules
from .apps import IdleApp, RandomDeliberateApp
from .departure import DepartureApp, build_departure_world
from .kernel import (
    MODE_RANDOM,
    WorldState,
    adversarial_init,
    fig_triangle,
    random_connected_world,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_BUDGET = 3
EXIT_ORACLE = 4


class ScenarioError(Exception):
    pass


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            scenario = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioError(str(e))
    if not isinstance(scenario, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(scenario) - {
        "seed", "processes", "relays", "messages", "corruption_profile",
        "scheduler", "fairness_bound", "max_steps", "predicate", "topology",
        "leaving", "app", "extra_edges", "chains",
    }
    if unknown:
        raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
    return scenario


def build_world(scenario: dict) -> tuple:
    seed = int(scenario.get("seed", 0))
    n = int(scenario.get("processes", 3))
    fairness = int(scenario.get("fairness_bound", 64))
    mode = scenario.get("scheduler", MODE_RANDOM)
    topology = scenario.get("topology", "random_connected")
    leaving = [int(p) for p in scenario.get("leaving", [])]
    app_kind = scenario.get("app", "idle")

    if topology == "adversarial":
        world = adversarial_init(
            seed,
            n,
            int(scenario.get("relays", 3 * n)),
            int(scenario.get("messages", 12)),
            scenario.get("corruption_profile", "mixed"),
            fairness_bound=fairness,
            mode=mode,
        )
    elif topology == "triangle":
        world = fig_triangle(seed=seed)
        world.fairness_bound = fairness
        world.mode = mode
    elif topology == "random_connected":
        world = random_connected_world(
            seed, n, extra_edges=int(scenario.get("extra_edges", 2)),
            chains=int(scenario.get("chains", 1)),
        )
        world.fairness_bound = fairness
        world.mode = mode
    elif topology == "departure_line":
        edges = [(i, i + 1) for i in range(n - 1)]
        world = build_departure_world(seed, n, edges, leaving, fairness_bound=fairness)
    else:
        raise ScenarioError(f"unknown topology: {topology}")

    for pid, proc in world.processes.items():
        proc.leaving = proc.leaving or pid in leaving
        if proc.app is None:
            if app_kind == "idle":
                proc.app = IdleApp()
            elif app_kind == "random_deliberate":
                proc.app = RandomDeliberateApp()
            elif app_kind == "departure":
                proc.app = DepartureApp()
            else:
                raise ScenarioError(f"unknown app: {app_kind}")
    return world, scenario


PREDICATES = {
    "is_legal": oracle.is_legal,
    "settled": lambda w: w.is_settled(),
    "none": lambda w: False,
    "all_stopped": lambda w: not w.layers,
}


def run_scenario(path: str, trace_path: str = None, dot_every: int = 0, dot_dir: str = None,
                 max_steps: int = None, seed: int = None, out=sys.stdout) -> int:
    try:
        scenario = load_scenario(path)
        if seed is not None:
            scenario["seed"] = seed
        world, scenario = build_world(scenario)
    except ScenarioError as e:
        print(f"error=parse detail={e}", file=out)
        return EXIT_PARSE

    predicate_name = scenario.get("predicate", "is_legal")
    if predicate_name == "fdp_legitimate":
        initial = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
        predicate = lambda w: oracle.fdp_legitimate(w, initial)
    elif predicate_name in PREDICATES:
        predicate = PREDICATES[predicate_name]
    else:
        print(f"error=parse detail=unknown predicate {predicate_name}", file=out)
        return EXIT_PARSE
    budget = int(max_steps if max_steps is not None else scenario.get("max_steps", 20000))

    if trace_path:
        world.trace = []
    frames = 0
    if dot_every and dot_dir:
        Path(dot_dir).mkdir(parents=True, exist_ok=True)

    steps = 0
    reached = predicate(world)
    while not reached and steps < budget:
        world.step()
        steps += 1
        if dot_every and dot_dir and steps % dot_every == 0:
            frame = Path(dot_dir) / f"frame_{frames:05d}.dot"
            frame.write_text(oracle.to_dot(world))
            frames += 1
        reached = predicate(world)

    check = oracle.WorldCheck(world)
    legal = check.is_legal()
    cycle_free = oracle.valid_graph_cycle_free(world, check)
    components = oracle.weakly_connected_components(oracle.extract_relay_graph(world))
    print(f"scenario={path}", file=out)
    print(f"seed={world.seed}", file=out)
    print(f"predicate={predicate_name}", file=out)
    print(f"steps={steps}", file=out)
    print(f"reached={'yes' if reached else 'no'}", file=out)
    print(f"legal={'yes' if legal else 'no'}", file=out)
    print(f"valid_graph_cycle_free={'yes' if cycle_free else 'no'}", file=out)
    print(f"components={len(components)}", file=out)
    print(f"state_hash={world.state_hash()}", file=out)
    if trace_path:
        Path(trace_path).write_text("\n".join(world.trace) + "\n")
    if not reached:
        return EXIT_BUDGET
    if predicate_name == "is_legal" and not cycle_free:
        return EXIT_ORACLE
    return EXIT_OK


def export_dot(world: WorldState, path: str) -> None:
    Path(path).write_text(oracle.to_dot(world))


# -- tiny DOT subset parser for the transform command ------------------------

_EDGE_RE = re.compile(r"^\s*(\w+)\s*->\s*(\w+)\s*(?:\[.*\])?\s*;?\s*$")


def parse_process_dot(text: str) -> rules.ProcessMultigraph:
    """Parse ``digraph { a -> b; ... }`` into a process multigraph.

    Node names must be integers or p<int>; anything else is an error.
    """
    edges = []
    names = set()

    def pid_of(token: str) -> int:
        m = re.fullmatch(r"p?(\d+)", token)
        if not m:
            raise ScenarioError(f"process node expected, got {token!r}")
        return int(m.group(1))

    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith(("digraph", "{", "}", "//", "#")):
            continue
        m = _EDGE_RE.match(line)
        if m:
            u, v = pid_of(m.group(1)), pid_of(m.group(2))
            edges.append((u, v))
            names.update((u, v))
            continue
        node = re.match(r"^(\w+)\s*(\[.*\])?;?$", line)
        if node:
            names.add(pid_of(node.group(1)))
            continue
        raise ScenarioError(f"unparseable dot line: {line!r}")
    if not names:
        raise ScenarioError("empty graph")
    return rules.ProcessMultigraph.of(range(max(names) + 1), edges)


def run_transform(source_path: str, target_path: str, seed: int = 0, out=sys.stdout) -> int:
    try:
        source = parse_process_dot(Path(source_path).read_text())
        target = parse_process_dot(Path(target_path).read_text())
    except (OSError, ScenarioError) as e:
        print(f"error=parse detail={e}", file=out)
        return EXIT_PARSE
    world = rules.build_simple_realization(seed, source)
    res = world.run_until(lambda w: w.is_settled(), 20000)
    if not res.reached:
        print("error=budget phase=settle", file=out)
        return EXIT_BUDGET
    try:
        plan = rules.plan_transform(world, target)
    except rules.PlanError as e:
        print(f"error=parse detail={e}", file=out)
        return EXIT_PARSE
    violations = []

    def on_step(w, i, step):
        comps = oracle.weakly_connected_components(oracle.extract_relay_graph(w))
        if len(comps) != 1:
            violations.append(i)

    try:
        rules.execute_plan(world, plan, on_step=on_step)
    except rules.PlanError as e:
        print(f"error=oracle detail={e}", file=out)
        return EXIT_ORACLE
    final = rules.cpg(world)
    ok = final.edges == target.edges and not violations
    print(f"plan_steps={len(plan.steps)}", file=out)
    print(f"final_cpg={'match' if final.edges == target.edges else 'mismatch'}", file=out)
    print(f"connectivity_violations={len(violations)}", file=out)
    print(f"state_hash={world.state_hash()}", file=out)
    return EXIT_OK if ok else EXIT_ORACLE


def run_suite(name: str, out=sys.stdout) -> int:
    from . import suites

    try:
        report = suites.run_suite(name)
    except KeyError:
        print(f"error=parse detail=unknown suite {name}", file=out)
        return EXIT_PARSE
    for line in report.lines:
        print(line, file=out)
    return EXIT_OK if report.passed else EXIT_ORACLE


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="relaysim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--trace", default=None)
    p_run.add_argument("--dot-every", type=int, default=0)
    p_run.add_argument("--dot-dir", default=None)
    p_run.add_argument("--max-steps", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)

    p_tr = sub.add_parser("transform", help="transform one topology into another")
    p_tr.add_argument("source")
    p_tr.add_argument("target")
    p_tr.add_argument("--seed", type=int, default=0)

    p_suite = sub.add_parser("suite", help="run an acceptance suite")
    p_suite.add_argument("name")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_scenario(
            args.scenario, trace_path=args.trace, dot_every=args.dot_every,
            dot_dir=args.dot_dir, max_steps=args.max_steps, seed=args.seed,
        )
    if args.command == "transform":
        return run_transform(args.source, args.target, seed=args.seed)
    if args.command == "suite":
        return run_suite(args.name)
    return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
