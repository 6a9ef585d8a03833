"""Departure demo: leaving processes weave themselves out of the overlay.

Every process runs the same actor.  A leaver first tells its neighbors it
is retiring, then chains its remaining outgoing edges together: each tick
it reverses one edge, carrying the reference of the next neighbor, so the
two become connected without it.  The receiver of such a bridge holds an
indirect reference and immediately reverses it into a pair of direct edges
(a fresh sink out, the peer's door back).  When nothing points at the
leaver anymore it stops; stopping deletes only empty sinks, so the actor
is deliberate throughout, and it only ever forwards references of direct
relays (doors and fresh sinks are level zero, stored edges level one).
"""

from __future__ import annotations

from .core import ActionInvocation, RelayRef
from .kernel import ProcessContext, WorldState, give_door, connect_door


def safe_to_stop(ctx: ProcessContext) -> bool:
    """Locally sufficient stop condition: nothing points here anymore.

    All owned relays are unreferenced sinks, so stopping deletes nothing
    anyone depends on.
    """
    for ref in ctx.get_relays():
        if not ctx.is_sink(ref) or ctx.incoming(ref) != 0:
            return False
    return True


LIFELINE_GRACE = 24  # own ticks a stayer keeps its last edge to a retiree


def departure_tick(ctx: ProcessContext) -> None:
    """One atomic scheduling of the departure actor."""
    store = ctx.store
    peers: dict = store.setdefault("peers", {})
    retired: set = store.setdefault("retired", set())
    discards: list = store.setdefault("discards", [])
    lifeline: dict = store.setdefault("lifeline", {})
    store.setdefault("retire_sent", set())

    # Drop queued references once nothing routes through them.
    still = []
    for ref in discards:
        if ctx.dead(ref):
            continue
        if ctx.incoming(ref) == 0:
            ctx.delete_relay(ref)
        else:
            still.append(ref)
    discards[:] = still

    if not ctx.leaving:
        # Edges to retirees kept as lifelines are released as soon as some
        # other attachment exists, or after a grace period: by then either
        # the retiree's handoff has landed or this process was the
        # component's only stayer and may stand alone.
        held = [pid for pid in sorted(peers) if pid in retired]
        if held:
            others = any(
                pid not in retired and not ctx.dead(ref) for pid, ref in peers.items()
            )
            for pid in held:
                lifeline.setdefault(pid, LIFELINE_GRACE)
                lifeline[pid] -= 1
                if others or lifeline[pid] <= 0 or ctx.dead(peers[pid]):
                    discards.append(peers.pop(pid))
                    lifeline.pop(pid, None)
        return

    sent: set = store["retire_sent"]
    pending = [pid for pid in sorted(peers) if pid not in sent]
    if pending:
        for pid in pending:
            ref = peers[pid]
            if not ctx.dead(ref):
                ctx.send(ref, "retire", (ctx.pid,))
            sent.add(pid)
        return

    for pid in [p for p, ref in peers.items() if ctx.dead(ref)]:
        peers.pop(pid)
    live = sorted(peers.items())
    if len(live) >= 2:
        # Hand every other neighbor an edge toward one anchor; a neighbor
        # not known to be leaving is preferred so the handoffs land on a
        # process that will outlive the exchange.
        stayers = [(p, r) for p, r in live if p not in retired]
        anchor_pid, anchor_ref = (stayers or live)[0]
        for pid, ref in live:
            if pid == anchor_pid or ctx.incoming(ref) != 0:
                continue
            ctx.send(ref, "bridge", (anchor_ref, anchor_pid, ctx.pid), relay_positions=(0,))
            ctx.delete_relay(ref)
            peers.pop(pid)
            return
        return
    if len(live) == 1:
        p1, r1 = live[0]
        # The last edge is cut once the peer is itself retiring, or once our
        # sinks drained: an empty door means every process that depended on
        # us found another attachment (their release is conditional), so the
        # peer no longer needs us either.
        sinks_drained = all(
            ctx.incoming(ref) == 0 for ref in ctx.get_relays() if ctx.is_sink(ref)
        )
        if ctx.incoming(r1) == 0 and (p1 in retired or sinks_drained):
            ctx.delete_relay(r1)
            peers.pop(p1)
        return
    if store.get("phase") != "draining":
        store["phase"] = "draining"
    if safe_to_stop(ctx):
        ctx.stop()


class DepartureApp:
    def on_tick(self, ctx: ProcessContext) -> None:
        departure_tick(ctx)

    def on_message(self, ctx: ProcessContext, action: ActionInvocation, via: RelayRef) -> None:
        store = ctx.store
        peers: dict = store.setdefault("peers", {})
        retired: set = store.setdefault("retired", set())
        discards: list = store.setdefault("discards", [])

        if action.label == "retire":
            (from_pid,) = action.params
            retired.add(from_pid)
            if not ctx.leaving and from_pid in peers:
                # Release the arc only while another attachment exists;
                # otherwise hold it as a lifeline until the retiree's
                # handoff lands (the tick ages it out).
                others = any(
                    pid not in retired and not ctx.dead(ref)
                    for pid, ref in peers.items()
                    if pid != from_pid
                )
                if others:
                    discards.append(peers.pop(from_pid))
            return

        if action.label == "bridge":
            ref, target_pid, _from_pid = action.params
            if ref is None or ctx.dead(ref):
                return
            # The bridged reference routes through the leaver; trade it for
            # a direct pair right away: send a fresh sink through, drop it.
            fresh = ctx.new_relay()
            ctx.send(ref, "hello", (fresh, ctx.pid), relay_positions=(0,))
            ctx.delete_relay(ref)
            return

        if action.label == "hello":
            ref, from_pid = action.params
            if ref is None:
                return
            if from_pid in retired:
                # The sender is weaving itself out: do not route through it,
                # but do hand it our door; its continued handoffs are what
                # links its dependents to us.
                door = store.get("door") or give_door(ctx.world, ctx.pid)
                store["door"] = door
                ctx.send(ref, "welcome", (door, ctx.pid), relay_positions=(0,))
                ctx.delete_relay(ref)
                return
            old = peers.get(from_pid)
            if old is not None and old != ref:
                discards.append(old)
            peers[from_pid] = ref
            store["retire_sent"] = store.get("retire_sent", set()) - {from_pid}
            door = store.get("door") or give_door(ctx.world, ctx.pid)
            store["door"] = door
            ctx.send(ref, "welcome", (door, ctx.pid), relay_positions=(0,))
            return

        if action.label == "welcome":
            ref, from_pid = action.params
            if ref is None:
                return
            if from_pid in retired:
                discards.append(ref)
                return
            old = peers.get(from_pid)
            if old is not None and old != ref:
                discards.append(old)
            peers[from_pid] = ref
            store["retire_sent"] = store.get("retire_sent", set()) - {from_pid}
            return


def build_departure_world(
    seed: int,
    n_processes: int,
    undirected_edges,
    leaving,
    fairness_bound: int = 64,
) -> WorldState:
    """Bidirectional overlay over the given undirected edges, everyone
    running the departure actor, the listed processes tagged leaving."""
    from .kernel import new_world

    world = new_world(seed, n_processes, fairness_bound=fairness_bound)
    leaving = set(leaving)
    for pid in range(n_processes):
        world.processes[pid].leaving = pid in leaving
        world.processes[pid].app = DepartureApp()
        give_door(world, pid)
    for u, v in sorted(set(tuple(sorted(e)) for e in undirected_edges)):
        ref_uv = connect_door(world, u, v)
        ref_vu = connect_door(world, v, u)
        world.processes[u].store.setdefault("peers", {})[v] = ref_uv
        world.processes[v].store.setdefault("peers", {})[u] = ref_vu
    return world
