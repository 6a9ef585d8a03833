"""Walkthrough: recovery from an arbitrarily corrupted start.

The generator scrambles levels and sink addresses, plants foreign and
duplicate keys, dangling announcements, relay cycles, and a spray of stale
control messages. The repair loop alone drives the state back to legality,
and it stays there.
"""

from relaysim import adversarial_init, is_legal
from relaysim.oracle import WorldCheck


def main():
    world = adversarial_init(seed=12, n_processes=4, n_relays=12, n_messages=15)
    check = WorldCheck(world)
    broken = [
        (str(r.id), check.relay_violations(r.id))
        for r in check.relays.values()
        if r.alive and not check.relay_valid(r.id)
    ]
    print(f"corrupted start: {len(broken)} invalid relays")
    for rid, violations in broken:
        print("  ", rid, violations)

    res = world.run_until(is_legal, 60_000)
    print(f"\nlegal after {res.steps} steps")

    window = 640
    for _ in range(window):
        world.step()
        assert is_legal(world)
    print(f"still legal through a {window}-step closure window")


if __name__ == "__main__":
    main()
