"""Walkthrough: any connected topology into any other, three rules only.

A path becomes a star and then an arbitrary random shape. Each plan step
is one rule application (introduction, fusion, or reversal); the process
graph stays weakly connected after every single step.
"""

from relaysim import cpg, execute_plan, plan_transform, process_components
from relaysim.rules import ProcessMultigraph, build_simple_realization, random_multigraph


def transform(world, target):
    plan = plan_transform(world, target)
    print(f"  plan: {len(plan.steps)} rule applications")
    checks = []
    execute_plan(world, plan, on_step=lambda w, i, s: checks.append(len(process_components(w))))
    assert set(checks) == {1}, "connectivity broke mid-plan"
    result = cpg(world)
    print(f"  reached {result.edges}, connected throughout: yes")
    return world


def main():
    path = ProcessMultigraph.of(range(4), [(0, 1), (1, 2), (2, 3)])
    star = ProcessMultigraph.of(range(4), [(1, 0), (2, 0), (3, 0)])

    world = build_simple_realization(5, path)
    world.run_until(lambda w: w.is_settled(), 4000)
    print("start:", cpg(world).edges)

    print("path -> star")
    transform(world, star)

    wild = random_multigraph(99, 4, extra=3)
    print("star ->", wild.edges)
    transform(world, wild)


if __name__ == "__main__":
    main()
