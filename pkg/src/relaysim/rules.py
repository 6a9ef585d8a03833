"""Topology transformation over the relay layer.

Three rules manipulate the relay graph from the application side:
introduction (send a reference, keep the carrier), fusion (merge two
same-target relays), and reversal (send a reference, then close the
carrier).  This module expresses them as macros over the layer primitives,
projects quiescent worlds onto process multigraphs, emulates the four
classical process rules, and plans full topology transformations executed
step by step inside the simulator.

Plans are symbolic: steps name relays through per-process slots so a plan
can be serialized, inspected, and replayed.  The receiving side of every
introduction files the new reference under the slot the planner chose.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional, Union

from .core import ActionInvocation, RelayRef
from .kernel import ProcessContext, WorldState, connect, new_world


class PlanError(Exception):
    pass


# ---------------------------------------------------------------------------
# Process multigraph and its extraction from a quiescent world.


@dataclass(frozen=True)
class ProcessMultigraph:
    processes: tuple
    edges: tuple  # sorted multiset of (u, v) pairs

    @staticmethod
    def of(processes, edges) -> "ProcessMultigraph":
        return ProcessMultigraph(tuple(sorted(processes)), tuple(sorted(edges)))

    def edge_counter(self) -> Counter:
        return Counter(self.edges)

    def undirected_adjacency(self) -> dict:
        adj = {p: set() for p in self.processes}
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return adj

    def is_weakly_connected(self) -> bool:
        if not self.processes:
            return True
        adj = self.undirected_adjacency()
        seen = {self.processes[0]}
        stack = [self.processes[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.processes)

    def reversed(self) -> "ProcessMultigraph":
        return ProcessMultigraph.of(self.processes, [(v, u) for u, v in self.edges])


def cpg(world: WorldState) -> ProcessMultigraph:
    """Corresponding process graph of a simple, quiescent relay graph.

    Requires every relay alive and direct, no references in transit, and no
    relay chain longer than one hop.  Sinks may have any number of incoming
    connections (zero-incoming sinks are private pseudonyms and project to
    nothing).
    """
    edges = []
    for rid, layer in sorted(world.layers.items()):
        for relay in sorted(layer.relays.values(), key=lambda r: r.id):
            if not relay.alive:
                raise PlanError(f"relay graph not simple: {relay.id} is dead")
            for env in relay.buf:
                msg = env.message
                if isinstance(msg, ActionInvocation) or (
                    hasattr(msg, "action") and isinstance(getattr(msg, "action"), ActionInvocation)
                ):
                    raise PlanError(f"relay graph not simple: payload in transit at {relay.id}")
            if relay.out_id is None:
                continue
            if relay.level != 1:
                raise PlanError(f"relay graph not simple: {relay.id} is indirect")
            target = world.find_relay(relay.out_id)
            if target is None or target.out_id is not None:
                raise PlanError(f"relay graph not simple: {relay.id} does not end at a sink")
            edges.append((rid.value, target.id.rid.value))
    return ProcessMultigraph.of([p for p in world.processes], edges)


# ---------------------------------------------------------------------------
# The three rules as application macros.


def relay_introduction(world: WorldState, pid: int, r: RelayRef, s: RelayRef) -> None:
    """Send a reference of `s` to the target of `r`, keeping both relays."""
    world.ctx(pid).send(r, "introduce", (s,), relay_positions=(0,))


def relay_fusion(world: WorldState, pid: int, r: RelayRef, r2: RelayRef) -> Optional[RelayRef]:
    """Merge two same-target relays; returns the merged reference or None."""
    return world.ctx(pid).merge({r, r2})


def relay_reversal(world: WorldState, pid: int, r: RelayRef, s: RelayRef) -> bool:
    """Send a reference of `s` via `r`, then close `r`.

    Rejected (returns False, no state change) unless r != s and r has no
    incoming connections.
    """
    ctx = world.ctx(pid)
    if r == s or ctx.incoming(r) != 0 or ctx.dead(r):
        return False
    ctx.send(r, "introduce", (s,), relay_positions=(0,))
    ctx.delete_relay(r)
    return True


# ---------------------------------------------------------------------------
# Plan steps.


@dataclass(frozen=True)
class NewRelayStep:
    pid: int
    slot: str
    rule = "new"


@dataclass(frozen=True)
class IntroductionStep:
    pid: int
    via_slot: str
    carry_slot: str
    to_slot: str
    rule = "introduction"


@dataclass(frozen=True)
class ReversalStep:
    pid: int
    via_slot: str
    carry_slot: str
    to_slot: Optional[str]  # None: the receiver discards the reference
    rule = "reversal"


@dataclass(frozen=True)
class FusionStep:
    pid: int
    slot_a: str
    slot_b: str
    to_slot: str
    rule = "fusion"


PlanStep = Union[NewRelayStep, IntroductionStep, ReversalStep, FusionStep]


@dataclass
class TransformPlan:
    steps: list
    initial_slots: dict  # (pid, slot) -> RelayId
    tree_meta: dict = field(default_factory=dict)

    def to_lines(self) -> list:
        out = []
        for i, s in enumerate(self.steps):
            if isinstance(s, NewRelayStep):
                out.append(f"{i} new {s.pid} {s.slot}")
            elif isinstance(s, IntroductionStep):
                out.append(f"{i} introduction {s.pid} via={s.via_slot} carry={s.carry_slot} to={s.to_slot}")
            elif isinstance(s, ReversalStep):
                to = s.to_slot if s.to_slot is not None else "discard"
                out.append(f"{i} reversal {s.pid} via={s.via_slot} carry={s.carry_slot} to={to}")
            else:
                out.append(f"{i} fusion {s.pid} {s.slot_a}+{s.slot_b} to={s.to_slot}")
        return out


# ---------------------------------------------------------------------------
# Plan execution: a bookkeeping application driving the layer primitives.


class TransformApp:
    """Executes queued plan commands, one per tick, and files received
    references under the slots the plan designates."""

    def on_tick(self, ctx: ProcessContext) -> None:
        queue = ctx.store.setdefault("queue", deque())
        if not queue:
            return
        step = queue.popleft()
        slots = ctx.store.setdefault("slots", {})
        if isinstance(step, NewRelayStep):
            slots[step.slot] = ctx.new_relay()
        elif isinstance(step, IntroductionStep):
            ctx.send(slots[step.via_slot], "adopt", (slots[step.carry_slot], step.to_slot), (0,))
        elif isinstance(step, ReversalStep):
            via = slots.pop(step.via_slot)
            if ctx.incoming(via) != 0:
                raise PlanError(f"reversal precondition failed at {step}")
            label = "adopt" if step.to_slot is not None else "discard"
            ctx.send(via, label, (slots[step.carry_slot], step.to_slot), (0,))
            ctx.delete_relay(via)
        elif isinstance(step, FusionStep):
            merged = ctx.merge({slots.pop(step.slot_a), slots.pop(step.slot_b)})
            if merged is None:
                raise PlanError(f"fusion merged nothing at {step}")
            slots[step.to_slot] = merged

    def on_message(self, ctx: ProcessContext, action: ActionInvocation, via: RelayRef) -> None:
        if action.label == "adopt":
            ref, slot = action.params
            if ref is None:
                raise PlanError("adoption lost to a duplicate key")
            ctx.store.setdefault("slots", {})[slot] = ref
        elif action.label == "discard":
            ref = action.params[0]
            if ref is not None:
                ctx.delete_relay(ref)


def _queues_empty(world: WorldState) -> bool:
    return all(not p.store.get("queue") for p in world.processes.values())


def attach_transform_apps(world: WorldState, plan: TransformPlan) -> None:
    for pid, proc in world.processes.items():
        proc.app = TransformApp()
        proc.store.setdefault("queue", deque())
        proc.store.setdefault("slots", {})
    for (pid, slot), relay_id in plan.initial_slots.items():
        world.processes[pid].store["slots"][slot] = RelayRef(relay_id)


def execute_plan(world: WorldState, plan: TransformPlan, per_step_budget: int = 8000, on_step=None) -> None:
    """Run a plan to completion, settling the world between steps."""
    attach_transform_apps(world, plan)
    for i, step in enumerate(plan.steps):
        world.processes[step.pid].store["queue"].append(step)
        res = world.run_until(lambda w: _queues_empty(w) and w.is_settled(), per_step_budget)
        if not res.reached:
            raise PlanError(f"step {i} ({step}) did not settle within {per_step_budget} steps")
        if on_step is not None:
            on_step(world, i, step)


# ---------------------------------------------------------------------------
# Emulation fragments for the classical process rules.


class _Namer:
    def __init__(self) -> None:
        self.n = 0

    def fresh(self, prefix: str) -> str:
        self.n += 1
        return f"{prefix}{self.n}"


def emulate_process_rule(rule: str, bindings: dict, namer: Optional[_Namer] = None) -> list:
    """Plan fragment emulating one classical process rule.

    bindings name the acting processes and the slots of the relays they
    hold: introduction/delegation need u, v, w plus u_to_v and u_to_w;
    fusion needs u, v plus slot_a and slot_b (and same_target: bool);
    reversal needs u, v plus u_to_v.  Result slots are returned inside the
    steps themselves.
    """
    nm = namer or _Namer()
    if rule == "introduction":
        u, v, w = bindings["u"], bindings["v"], bindings["w"]
        tmp, n = nm.fresh("tmp"), nm.fresh("n")
        return [
            IntroductionStep(u, via_slot=bindings["u_to_w"], carry_slot=bindings["u_to_v"], to_slot=tmp),
            NewRelayStep(w, n),
            ReversalStep(w, via_slot=tmp, carry_slot=n, to_slot=bindings.get("result", nm.fresh("e"))),
        ]
    if rule == "delegation":
        u, v, w = bindings["u"], bindings["v"], bindings["w"]
        tmp, n = nm.fresh("tmp"), nm.fresh("n")
        return [
            ReversalStep(u, via_slot=bindings["u_to_w"], carry_slot=bindings["u_to_v"], to_slot=tmp),
            NewRelayStep(w, n),
            ReversalStep(w, via_slot=tmp, carry_slot=n, to_slot=bindings.get("result", nm.fresh("e"))),
        ]
    if rule == "fusion":
        u = bindings["u"]
        if bindings.get("same_target"):
            return [FusionStep(u, bindings["slot_a"], bindings["slot_b"], bindings.get("result", nm.fresh("e")))]
        n = nm.fresh("n")
        return [
            NewRelayStep(u, n),
            ReversalStep(u, via_slot=bindings["slot_b"], carry_slot=n, to_slot=None),
        ]
    if rule == "reversal":
        u, v = bindings["u"], bindings["v"]
        n = nm.fresh("n")
        return [
            NewRelayStep(u, n),
            ReversalStep(u, via_slot=bindings["u_to_v"], carry_slot=n, to_slot=bindings.get("result", nm.fresh("e"))),
        ]
    raise PlanError(f"unknown process rule: {rule}")


# ---------------------------------------------------------------------------
# Full transformation planner.


class _Planner:
    def __init__(self, world: WorldState) -> None:
        if not world.is_settled():
            raise PlanError("transformation planning requires a settled world")
        self.nm = _Namer()
        self.steps: list = []
        self.initial_slots: dict = {}
        # abstract edges: (u, v) -> list of slot names held by u
        self.edge_slots: dict = {}
        # abstract indirect relays: handle -> dict(owner, sink, target handle or None)
        self.indirect: dict = {}
        self.inbound: Counter = Counter()
        handle_of = {}
        for rid, layer in sorted(world.layers.items()):
            for relay in sorted(layer.relays.values(), key=lambda r: r.id):
                slot = f"w{relay.id.rid.value}_{relay.id.serial}"
                self.initial_slots[(rid.value, slot)] = relay.id
                handle_of[relay.id] = (rid.value, slot)
        for rid, layer in sorted(world.layers.items()):
            for relay in sorted(layer.relays.values(), key=lambda r: r.id):
                if relay.out_id is None:
                    continue
                owner, slot = handle_of[relay.id]
                if relay.level == 1:
                    self.edge_slots.setdefault((owner, relay.sink_rid.value), []).append(slot)
                else:
                    self.indirect[(owner, slot)] = {
                        "owner": owner,
                        "sink": relay.sink_rid.value,
                        "target": handle_of.get(relay.out_id),
                    }
                if relay.out_id in handle_of:
                    self.inbound[handle_of[relay.out_id]] += 1
        self.pids = sorted(world.processes)

    # -- multigraph bookkeeping ------------------------------------------

    def m_count(self, u: int, v: int) -> int:
        return len(self.edge_slots.get((u, v), []))

    def _add_edge(self, u: int, v: int, slot: str) -> None:
        self.edge_slots.setdefault((u, v), []).append(slot)

    def _take_edge(self, u: int, v: int) -> str:
        slots = self.edge_slots.get((u, v))
        if not slots:
            raise PlanError(f"no edge instance ({u},{v}) available")
        return slots.pop(0)

    def _peek_edge(self, u: int, v: int) -> str:
        slots = self.edge_slots.get((u, v))
        if not slots:
            raise PlanError(f"no edge instance ({u},{v}) available")
        return slots[0]

    def multigraph(self) -> ProcessMultigraph:
        edges = []
        for (u, v), slots in self.edge_slots.items():
            edges.extend([(u, v)] * len(slots))
        return ProcessMultigraph.of(self.pids, edges)

    # -- fragments ----------------------------------------------------------

    def frag_self_introduction(self, u: int, v: int) -> None:
        """u introduces itself to v over an existing (u,v) edge: adds (v,u)."""
        n = self.nm.fresh("n")
        slot = self.nm.fresh("e")
        self.steps.append(NewRelayStep(u, n))
        self.steps.append(IntroductionStep(u, via_slot=self._peek_edge(u, v), carry_slot=n, to_slot=slot))
        self._add_edge(v, u, slot)

    def frag_introduction(self, u: int, v: int, w: int) -> None:
        """u introduces v to w using edges (u,v) and (u,w): adds (v,w)."""
        slot = self.nm.fresh("e")
        frag = emulate_process_rule(
            "introduction",
            {
                "u": u,
                "v": v,
                "w": w,
                "u_to_v": self._peek_edge(u, v),
                "u_to_w": self._peek_edge(u, w),
                "result": slot,
            },
            self.nm,
        )
        self.steps.extend(frag)
        self._add_edge(v, w, slot)

    def frag_reversal(self, u: int, v: int) -> None:
        """u reverses its (u,v) edge: removes (u,v), adds (v,u)."""
        slot = self.nm.fresh("e")
        frag = emulate_process_rule(
            "reversal", {"u": u, "v": v, "u_to_v": self._take_edge(u, v), "result": slot}, self.nm
        )
        self.steps.extend(frag)
        self._add_edge(v, u, slot)

    def frag_drop(self, u: int, v: int) -> None:
        """Remove one (u,v) edge; the carried throwaway is discarded by v."""
        n = self.nm.fresh("n")
        self.steps.append(NewRelayStep(u, n))
        self.steps.append(ReversalStep(u, via_slot=self._take_edge(u, v), carry_slot=n, to_slot=None))

    # -- phase 1: eliminate indirect relays ----------------------------------

    def phase_eliminate_indirect(self) -> None:
        while self.indirect:
            eligible = sorted(h for h in self.indirect if self.inbound[h] == 0)
            if not eligible:
                raise PlanError("indirect relays form a cycle")
            handle = eligible[0]
            info = self.indirect.pop(handle)
            owner, slot = handle
            n = self.nm.fresh("n")
            new_slot = self.nm.fresh("e")
            self.steps.append(NewRelayStep(owner, n))
            self.steps.append(ReversalStep(owner, via_slot=slot, carry_slot=n, to_slot=new_slot))
            self._add_edge(info["sink"], owner, new_slot)
            if info["target"] is not None:
                self.inbound[info["target"]] -= 1

    # -- phase 2: reach a given edge multiset ---------------------------------

    def phase_to_multiset(self, target: Counter) -> None:
        c = self.pids[0]
        # Everybody gets an edge to c.
        adj = self.multigraph().undirected_adjacency()
        parent = {c: None}
        order = []
        queue = deque([c])
        while queue:
            node = queue.popleft()
            order.append(node)
            for nb in sorted(adj[node]):
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        if len(order) != len(self.pids):
            raise PlanError("source graph is not weakly connected")
        for x in order[1:]:
            if self.m_count(x, c) > 0:
                continue
            p = parent[x]
            if p == c:
                if self.m_count(c, x) > 0:
                    self.frag_self_introduction(c, x)
                else:
                    raise PlanError("tree edge vanished")
            else:
                if self.m_count(p, x) == 0:
                    if self.m_count(x, p) == 0:
                        raise PlanError("tree edge vanished")
                    self.frag_reversal(x, p)
                self.frag_introduction(p, x, c)
        # c gets an edge to everybody.
        for x in self.pids[1:]:
            if self.m_count(c, x) == 0:
                self.frag_self_introduction(x, c)
        # Build missing target copies through the hub.
        pairs = sorted(set(target) | set(self.edge_slots))
        for (a, b) in pairs:
            need = target.get((a, b), 0) - self.m_count(a, b)
            for _ in range(need):
                if a == c:
                    self.frag_self_introduction(b, c)
                elif b == c:
                    self.frag_self_introduction(c, a)
                else:
                    self.frag_introduction(c, a, b)
        # Drop every surplus copy.
        for (a, b) in pairs:
            extra = self.m_count(a, b) - target.get((a, b), 0)
            for _ in range(extra):
                self.frag_drop(a, b)

    # -- phase 3: rebuild the target's sink trees ------------------------------

    def phase_rebuild(self, target: ProcessMultigraph) -> None:
        # Every target edge (u, v) becomes its own one-relay tree: the root v
        # creates the sink and reverses it out to u over the mirrored edge.
        for u, v in sorted(target.edges):
            ts = self.nm.fresh("tree")
            slot = self.nm.fresh("e")
            self.steps.append(NewRelayStep(v, ts))
            self.steps.append(ReversalStep(v, via_slot=self._take_edge(v, u), carry_slot=ts, to_slot=slot))
            self._add_edge(u, v, slot)


def plan_transform(world: WorldState, target: ProcessMultigraph) -> TransformPlan:
    """Plan a transformation of the world's topology into `target`.

    Both the current and the target graph must be weakly connected over the
    same processes; self-loops are not supported.
    """
    planner = _Planner(world)
    if tuple(sorted(world.processes)) != target.processes:
        raise PlanError("target names a different process set")
    if any(u == v for u, v in target.edges):
        raise PlanError("self-loops are not supported")
    if not target.is_weakly_connected():
        raise PlanError("target graph is not weakly connected")
    planner.phase_eliminate_indirect()
    if not planner.multigraph().is_weakly_connected():
        raise PlanError("source graph is not weakly connected")
    mirrored = target.reversed().edge_counter()
    planner.phase_to_multiset(mirrored)
    planner.phase_rebuild(target)
    plan = TransformPlan(planner.steps, planner.initial_slots)
    plan.tree_meta = {"edges": list(target.edges)}
    return plan


# ---------------------------------------------------------------------------
# World realizations of process multigraphs (used by tests and the harness).


def build_simple_realization(
    seed: int, graph: ProcessMultigraph, shared_sinks: bool = False
) -> WorldState:
    """A legal world whose process projection equals `graph`.

    Each edge (u, v) is one direct relay of u feeding a sink of v; with
    shared_sinks, parallel edges reuse one sink, which makes the parallel
    relays mergeable (same target).
    """
    world = new_world(seed, len(graph.processes))
    sink_for = {}
    for idx, (u, v) in enumerate(sorted(graph.edges)):
        if shared_sinks and (u, v) in sink_for:
            sink_id = sink_for[(u, v)]
        else:
            ref = world.layer_of(v).new_relay()
            sink_id = ref.relay_id
            sink_for[(u, v)] = sink_id
        world.processes[u].store.setdefault("edges", []).append(
            (v, connect(world, u, sink_id))
        )
    return world


def random_multigraph(seed: int, n: int, extra: int = 3, allow_parallel: bool = True) -> ProcessMultigraph:
    rng = random.Random(seed)
    edges = []
    for pid in range(1, n):
        a, b = pid, rng.randrange(pid)
        edges.append((a, b) if rng.random() < 0.5 else (b, a))
    for _ in range(extra):
        u, v = rng.randrange(n), rng.randrange(n)
        if u == v:
            continue
        if not allow_parallel and ((u, v) in edges):
            continue
        edges.append((u, v))
    return ProcessMultigraph.of(range(n), edges)
