"""Omniscient checkers over a world snapshot.

Everything here is read-only: relay-graph extraction, per-relay validity
with the full property list, in-flight parameter validity, header validity,
legality, connectivity, and the departure-problem end-state predicate.
Protocol code never consults this module.

Vertices of the extracted graph include dead relays still draining their
buffers: their outgoing and in-buffer reference edges are what keeps the
graph weakly connected in the middle of a reversal.  Legality, by contrast,
judges only alive relays and parameters carried by alive relays; a relay
that the application deleted is a tombstone, not a defect.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import (
    ActionInvocation,
    InRelayClosed,
    Key,
    NotAuthorized,
    OutRelayClosed,
    Ping,
    Probe,
    ProbeFail,
    Relay,
    RelayId,
    RelayParameter,
    Rid,
    Transmit,
    belongs_to,
    rid_of,
)
from .kernel import WorldState


def _params_of(transmit: Transmit) -> list:
    action = transmit.action
    if not isinstance(action, ActionInvocation):
        return []
    return [p for p in action.params if isinstance(p, RelayParameter)]


class WorldCheck:
    """Single-pass verification context: index once, query many times."""

    def __init__(self, world: WorldState) -> None:
        self.world = world
        self.relays: dict[RelayId, Relay] = {}
        self.layer_rids: dict[RelayId, Rid] = {}
        for rid, layer in world.layers.items():
            for relay in layer.relays.values():
                self.relays[relay.id] = relay
                self.layer_rids[relay.id] = rid

        self.in_key_count: dict[Key, int] = {}
        self.out_key_holders: dict[Key, list] = {}
        for relay in self.relays.values():
            for e in relay.in_set:
                self.in_key_count[e.key] = self.in_key_count.get(e.key, 0) + 1
            for k in relay.out_keys:
                self.out_key_holders.setdefault(k, []).append(relay.id)

        self.pings_by_id: dict[RelayId, list] = {}
        self.orc_ids: set = set()
        self.notauth: list = []
        self.notauth_by_out: dict[RelayId, list] = {}
        self.probefails: list = []
        self.inrelays: list = []
        # (carrier relay id | None, transmit); carrier None for layer/orphan
        self.transmits: list = []
        self.probe_locs: list = []  # (carrier relay id | None, Probe)
        self.header_key_count: dict[Key, int] = {}
        self.param_count: dict[Key, int] = {}
        self.params: list = []  # (carrier relay id | None, Transmit, RelayParameter)

        for rid, layer in world.layers.items():
            for relay in layer.relays.values():
                for env in relay.buf:
                    self._index_message(relay.id, env.message)
            for env in layer.layer_buf:
                self._index_message(None, env.message)
        for env in world.orphan_out:
            self._index_message(None, env.message)

        self._valid: dict[RelayId, bool] = {}
        self._violations: dict[RelayId, list] = {}
        self._in_idx: dict[RelayId, dict] = {}
        self._evaluated = False

    def _in_by_key(self, relay: Relay) -> dict:
        idx = self._in_idx.get(relay.id)
        if idx is None:
            idx = {}
            for e in relay.in_set:
                idx.setdefault(e.key, []).append(e)
            self._in_idx[relay.id] = idx
        return idx

    def _index_message(self, carrier, msg) -> None:
        if isinstance(msg, Transmit):
            self.transmits.append((carrier, msg))
            self.header_key_count[msg.header.key] = self.header_key_count.get(msg.header.key, 0) + 1
            if isinstance(msg.action, Probe):
                self.probe_locs.append((carrier, msg.action))
            else:
                for p in _params_of(msg):
                    self.param_count[p.key] = self.param_count.get(p.key, 0) + 1
                    self.params.append((carrier, msg, p))
        elif isinstance(msg, Ping):
            self.pings_by_id.setdefault(msg.id, []).append(msg)
        elif isinstance(msg, OutRelayClosed):
            self.orc_ids.add(msg.id)
        elif isinstance(msg, NotAuthorized):
            self.notauth.append(msg.original)
            self.notauth_by_out.setdefault(msg.original.header.out_id, []).append(msg.original)
            # wrapped header and parameters still occupy their keys
            self.header_key_count[msg.original.header.key] = (
                self.header_key_count.get(msg.original.header.key, 0) + 1
            )
            for p in _params_of(msg.original):
                self.param_count[p.key] = self.param_count.get(p.key, 0) + 1
        elif isinstance(msg, ProbeFail):
            self.probefails.append(msg)
        elif isinstance(msg, InRelayClosed):
            self.inrelays.append(msg)

    # -- relay validity ------------------------------------------------------
    #
    # Validity is mutually recursive: an unconfirmed entry needs a valid
    # announcing relay and a non-sink needs a valid next hop, and both kinds
    # of reference may point back at the relay itself (sending a relay's own
    # reference via itself is allowed).  Local properties are checked first;
    # invalidity then propagates along the two reference kinds until a
    # fixpoint.  Genuine out-connection cycles always fail locally because
    # levels cannot strictly decrease around a loop.

    def _evaluate_all(self) -> None:
        if self._evaluated:
            return
        self._evaluated = True
        local: dict[RelayId, list] = {}
        via_deps: dict[RelayId, list] = {}
        next_dep: dict[RelayId, RelayId] = {}
        for relay in self.relays.values():
            local[relay.id] = self._check_relay_local(relay, via_deps, next_dep)
        # Reverse dependency edges: if dep becomes invalid, holder gains code.
        dependents: dict[RelayId, list] = {}
        for holder, vias in via_deps.items():
            for via in vias:
                dependents.setdefault(via, []).append((holder, "P4"))
        for holder, nxt in next_dep.items():
            dependents.setdefault(nxt, []).append((holder, "P11b"))
        worklist = [rid for rid, v in local.items() if v]
        while worklist:
            bad = worklist.pop()
            for holder, code in dependents.get(bad, ()):
                v = local[holder]
                if code not in v:
                    was_valid = not v
                    v.append(code)
                    if was_valid:
                        worklist.append(holder)
        self._violations = local
        self._valid = {rid: not v for rid, v in local.items()}

    def relay_valid(self, relay_id: RelayId) -> bool:
        self._evaluate_all()
        return self._valid.get(relay_id, False)

    def relay_violations(self, relay_id: RelayId) -> list:
        self._evaluate_all()
        return self._violations.get(relay_id, ["P2"])

    def _check_relay_local(self, relay: Relay, via_deps: dict, next_dep: dict) -> list:
        v: list = []
        rid = relay.id.rid
        if not relay.alive:
            v.append("P1")
        # P2: id uniqueness is structural (per-layer tables keyed by id and
        # serials minted per layer); nothing to scan.
        # P3: out always stores a (key set, id) pair by construction.
        p4 = p5 = p9 = False
        deps = []
        unconfirmed_keys = None
        for e in relay.in_set:
            if not p5 and (self.in_key_count.get(e.key, 0) > 1 or not belongs_to(e.key, rid)):
                p5 = True
            if not e.confirmed:
                if unconfirmed_keys is None:
                    unconfirmed_keys = set()
                unconfirmed_keys.add(e.key)
                via = self.relays.get(e.via)
                if via is None or e.via.rid != rid:
                    p4 = True
                elif via.alive:
                    # A dead announcing relay is a reversal in flight, still
                    # draining the announcement; only an alive-but-invalid
                    # or missing one condemns the entry.
                    deps.append(e.via)
                if not p9 and not self._pending_entry_backed(relay, e):
                    p9 = True
        if deps:
            via_deps[relay.id] = deps
        if p4:
            v.append("P4")
        if p5:
            v.append("P5")
        for ping in self.pings_by_id.get(relay.id, ()):
            if ping.level != relay.level or ping.sink_rid != relay.sink_rid:
                v.append("P6")
                break
            if unconfirmed_keys and ping.key in unconfirmed_keys:
                v.append("P6")
                break
        if relay.id in self.orc_ids:
            v.append("P7")
        if relay.id in self.notauth_by_out and self._notauthorized_conflicts(relay):
            v.append("P8")
        if p9:
            v.append("P9")
        if relay.out_id is None:
            if relay.out_keys or relay.level != 0 or relay.sink_rid != rid:
                v.append("P10")
        else:
            target = self.relays.get(relay.out_id)
            if target is None:
                v.append("P11b")
            else:
                next_dep[relay.id] = relay.out_id
                if relay.level != target.level + 1 or relay.sink_rid != target.sink_rid:
                    v.append("P11c")
                if not self._one_key_anchored(relay, target):
                    v.append("P11d")
            for key in relay.out_keys:
                # Only alive co-holders violate uniqueness; merge leaves
                # its tombstones holding the inherited keys until collected.
                if any(
                    h != relay.id and h.rid == rid and self.relays[h].alive
                    for h in self.out_key_holders.get(key, ())
                ):
                    v.append("P11e")
                    break
            if self.inrelays:
                for m in self.inrelays:
                    if m.sender_rid == rid and m.target_id == relay.out_id and m.keys & relay.out_keys:
                        v.append("P11f")
                        break
        return v

    def _notauthorized_conflicts(self, relay: Relay) -> bool:
        for original in self.notauth_by_out.get(relay.id, ()):
            h = original.header
            for e in relay.in_set:
                if e.key != h.key:
                    continue
                if e.confirmed:
                    if rid_of(h.in_id) == e.from_rid:
                        return True
                else:
                    via = self.relays.get(e.via)
                    if via is not None and rid_of(h.in_id) == via.sink_rid:
                        return True
        return False

    def _chain_from(self, start: Relay) -> Optional[list]:
        """Out-connection sequence from `start` to its sink; None if broken."""
        chain = [start]
        seen = {start.id}
        cur = start
        while cur.out_id is not None:
            nxt = self.relays.get(cur.out_id)
            if nxt is None or nxt.id in seen:
                return None
            chain.append(nxt)
            seen.add(nxt.id)
            cur = nxt
        return chain

    def _no_killer_probe(self, key: Key, via: Relay, allowed: set) -> bool:
        """No probe carrying `key` as a control key, started over `via`'s
        out-keys, sits in a buffer outside the allowed chain prefix."""
        for carrier, probe in self.probe_locs:
            if key not in probe.control_keys or not probe.key_sequence:
                continue
            if probe.key_sequence[0] not in via.out_keys:
                continue
            if carrier is None or carrier not in allowed:
                return False
        return True

    def _pending_entry_backed(self, relay: Relay, entry) -> bool:
        """The unconfirmed In entry still has a live confirmation path."""
        via = self.relays.get(entry.via)
        if via is None:
            return False
        for pf in self.probefails:
            if pf.key == entry.key and pf.key_sequence and pf.key_sequence[0] in via.out_keys:
                return False
        chain = self._chain_from(via)
        if chain is None:
            return False
        key = entry.key
        # Far side already created its relay and the activation probe is on
        # its way back.
        sink_rid = via.sink_rid
        for candidate in self.relays.values():
            if (
                self.layer_rids[candidate.id] == sink_rid
                and candidate.out_id == relay.id
                and key in candidate.out_keys
                and candidate.level == relay.level + 1
            ):
                if any(
                    isinstance(env.message, Transmit)
                    and isinstance(env.message.action, Probe)
                    and env.message.action.key_sequence == (key,)
                    and not env.message.action.control_keys
                    and self.valid_header(env.message, relay.id)
                    for env in candidate.buf
                ):
                    allowed = {r.id for r in chain[:-1]}
                    if self._no_killer_probe(key, via, allowed):
                        return True
        # Or the announcing message is still in transit along the chain.
        for j in range(len(chain) - 1):
            holder, nxt = chain[j], chain[j + 1]
            for env in holder.buf:
                msg = env.message
                if (
                    isinstance(msg, Transmit)
                    and not isinstance(msg.action, Probe)
                    and any(p.key == key for p in _params_of(msg))
                    and self.valid_header(msg, nxt.id)
                ):
                    allowed = {r.id for r in chain[: j + 1]}
                    if self._no_killer_probe(key, via, allowed):
                        return True
        return False

    def _one_key_anchored(self, relay: Relay, target: Relay) -> bool:
        rid = self.layer_rids[relay.id]
        idx = self._in_by_key(target)
        for key in relay.out_keys:
            for e in idx.get(key, ()):
                if e.confirmed and e.from_rid == rid:
                    return True
                if not e.confirmed:
                    via = self.relays.get(e.via)
                    if via is not None and via.sink_rid == rid:
                        if any(
                            isinstance(env.message, Transmit)
                            and isinstance(env.message.action, Probe)
                            and env.message.header.key == key
                            and env.message.header.in_id == relay.id
                            and env.message.header.out_id == relay.out_id
                            and env.message.action.key_sequence == (key,)
                            for env in relay.buf
                        ):
                            return True
        return False

    # -- header validity -------------------------------------------------------

    def valid_header(self, message: Transmit, relay_id: RelayId) -> bool:
        relay = self.relays.get(relay_id)
        if relay is None:
            return False
        layer = self.world.layers.get(self.layer_rids[relay_id])
        return layer is not None and layer.header_valid_for(relay, message.header)

    # -- parameter validity ------------------------------------------------------

    def param_violations(self, carrier_id: Optional[RelayId], message: Transmit, param: RelayParameter) -> list:
        v: list = []
        carrier = self.relays.get(carrier_id) if carrier_id is not None else None
        if carrier is None or not self.relay_valid(carrier.id):
            v.append("C1")
        if self.param_count.get(param.key, 0) > 1:
            v.append("C2")
        target = self.relays.get(param.id)
        if target is None or not self.relay_valid(param.id):
            v.append("C3")
            return v
        if param.level != target.level + 1 or param.sink_rid != target.sink_rid:
            v.append("C4")
        announced = None
        for e in target.in_set:
            if not e.confirmed and e.key == param.key:
                via = self.relays.get(e.via)
                if (
                    via is not None
                    and self.layer_rids.get(e.via) == self.layer_rids[target.id]
                    and (not via.alive or self.relay_valid(via.id))
                    and carrier is not None
                    and via.sink_rid == carrier.sink_rid
                ):
                    announced = via
                    break
        if announced is None or not belongs_to(param.key, self.layer_rids[target.id]):
            v.append("C5")
        rids = {p.id.rid for p in _params_of(message)}
        if len(rids) > 1:
            v.append("C6")
        if self.out_key_holders.get(param.key):
            v.append("C7")
        if self.header_key_count.get(param.key, 0) > 0:
            v.append("C8")
        if announced is not None:
            for pf in self.probefails:
                if pf.key == param.key and pf.key_sequence and pf.key_sequence[0] in announced.out_keys:
                    v.append("C9")
                    break
            if not self._probe_positions_ok(param.key, announced, message):
                v.append("C10")
        for m in self.inrelays:
            if param.key in m.keys and m.target_id == target.id:
                v.append("C11")
                break
        return v

    def _probe_positions_ok(self, key: Key, announced: Relay, message: Transmit) -> bool:
        """Every probe hunting `key` must trail the announcing message."""
        relevant = [
            (carrier, probe)
            for carrier, probe in self.probe_locs
            if key in probe.control_keys
            and probe.key_sequence
            and probe.key_sequence[0] in announced.out_keys
        ]
        if not relevant:
            return True
        chain = self._chain_from(announced)
        if chain is None:
            return False
        positions = {r.id: i for i, r in enumerate(chain)}
        message_pos = None
        for i, r in enumerate(chain):
            if any(env.message is message for env in r.buf):
                message_pos = i
                break
        for carrier, probe in relevant:
            k = len(probe.key_sequence)
            if carrier is None or positions.get(carrier) != k - 1:
                return False
            for j, seq_key in enumerate(probe.key_sequence):
                if j >= len(chain) or seq_key not in chain[j].out_keys:
                    return False
            if message_pos is None or message_pos < k:
                return False
        return True

    # -- aggregates ---------------------------------------------------------------

    def all_alive_valid(self) -> bool:
        return all(self.relay_valid(r.id) for r in self.relays.values() if r.alive)

    def is_legal(self) -> bool:
        if not self.all_alive_valid():
            return False
        for carrier_id, message, param in self.params:
            if carrier_id is None:
                continue
            carrier = self.relays.get(carrier_id)
            if carrier is None:
                continue
            violations = self.param_violations(carrier_id, message, param)
            if not carrier.alive:
                # A reversal leaves the reference draining out of a dead
                # carrier; that is fine exactly as long as everything else
                # about it is intact, because delivery then recreates a
                # valid relay.
                violations = [v for v in violations if v != "C1"]
            if violations:
                return False
        return True


# ---------------------------------------------------------------------------
# Public operations.


def valid_relay(world: WorldState, relay_id: RelayId, check: Optional[WorldCheck] = None):
    check = check or WorldCheck(world)
    ok = check.relay_valid(relay_id)
    return ok, check.relay_violations(relay_id)


def valid_relay_parameter(world: WorldState, carrier_id: RelayId, param: RelayParameter, check: Optional[WorldCheck] = None):
    check = check or WorldCheck(world)
    message = None
    for cid, m, p in check.params:
        if cid == carrier_id and p == param:
            message = m
            break
    if message is None:
        return False, ["C1"]
    violations = check.param_violations(carrier_id, message, param)
    return not violations, violations


def valid_header(world: WorldState, message: Transmit, relay_id: RelayId) -> bool:
    return WorldCheck(world).valid_header(message, relay_id)


def is_legal(world: WorldState) -> bool:
    return WorldCheck(world).is_legal()


# ---------------------------------------------------------------------------
# Relay graph.

PROCESS = "P"
RELAY = "R"


@dataclass(slots=True)
class RelayGraph:
    vertices: set = field(default_factory=set)
    explicit_edges: set = field(default_factory=set)
    implicit_edges: set = field(default_factory=set)

    @property
    def edges(self) -> set:
        return self.explicit_edges | self.implicit_edges

    def process_vertices(self) -> list:
        return sorted(v[1] for v in self.vertices if v[0] == PROCESS)

    def relay_vertices(self) -> list:
        return sorted((v[1] for v in self.vertices if v[0] == RELAY))


def extract_relay_graph(world: WorldState) -> RelayGraph:
    g = RelayGraph()
    for pid, proc in world.processes.items():
        if proc.active:
            g.vertices.add((PROCESS, pid))
    all_relays: dict[RelayId, Relay] = {}
    for layer in world.layers.values():
        for relay in layer.relays.values():
            all_relays[relay.id] = relay
            g.vertices.add((RELAY, relay.id))
    for relay in all_relays.values():
        owner = (PROCESS, relay.id.rid.value)
        if owner in g.vertices:
            g.explicit_edges.add((owner, (RELAY, relay.id)))
        if relay.out_id is None:
            if owner in g.vertices:
                g.explicit_edges.add(((RELAY, relay.id), owner))
        elif relay.out_id in all_relays:
            g.explicit_edges.add(((RELAY, relay.id), (RELAY, relay.out_id)))
        for env in relay.buf:
            msg = env.message
            if isinstance(msg, Transmit):
                for p in _params_of(msg):
                    if p.id in all_relays:
                        g.implicit_edges.add(((RELAY, relay.id), (RELAY, p.id)))
    return g


def valid_relay_graph(world: WorldState, check: Optional[WorldCheck] = None) -> RelayGraph:
    check = check or WorldCheck(world)
    g = RelayGraph()
    for pid, proc in world.processes.items():
        if proc.active:
            g.vertices.add((PROCESS, pid))
    for relay in check.relays.values():
        if relay.alive and check.relay_valid(relay.id):
            g.vertices.add((RELAY, relay.id))
    for relay in check.relays.values():
        node = (RELAY, relay.id)
        if node not in g.vertices:
            continue
        owner = (PROCESS, relay.id.rid.value)
        if owner in g.vertices:
            g.explicit_edges.add((owner, node))
        if relay.out_id is None:
            if owner in g.vertices:
                g.explicit_edges.add((node, owner))
        elif (RELAY, relay.out_id) in g.vertices:
            g.explicit_edges.add((node, (RELAY, relay.out_id)))
    for carrier_id, message, param in check.params:
        if carrier_id is None:
            continue
        if (RELAY, carrier_id) in g.vertices and (RELAY, param.id) in g.vertices:
            if not check.param_violations(carrier_id, message, param):
                g.implicit_edges.add(((RELAY, carrier_id), (RELAY, param.id)))
    return g


def weakly_connected_components(graph: RelayGraph) -> list:
    """Partition of the process vertices by weak connectivity."""
    adj: dict = {v: [] for v in graph.vertices}
    for a, b in graph.edges:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    seen: set = set()
    components = []
    for v in sorted(graph.vertices):
        if v in seen:
            continue
        stack = [v]
        seen.add(v)
        members = []
        while stack:
            node = stack.pop()
            members.append(node)
            for nb in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        pids = sorted(n[1] for n in members if n[0] == PROCESS)
        if pids:
            components.append(pids)
    return components


def process_components(world: WorldState) -> list:
    return weakly_connected_components(extract_relay_graph(world))


def valid_graph_cycle_free(world: WorldState, check: Optional[WorldCheck] = None) -> bool:
    """No directed cycle among valid relays' outgoing connections."""
    check = check or WorldCheck(world)
    valid_ids = {r.id for r in check.relays.values() if r.alive and check.relay_valid(r.id)}
    color: dict = {}

    def dfs(rid: RelayId) -> bool:
        color[rid] = 1
        relay = check.relays[rid]
        nxt = relay.out_id
        if nxt in valid_ids:
            c = color.get(nxt, 0)
            if c == 1:
                return False
            if c == 0 and not dfs(nxt):
                return False
        color[rid] = 2
        return True

    for rid in valid_ids:
        if color.get(rid, 0) == 0 and not dfs(rid):
            return False
    return True


def fdp_legitimate(world: WorldState, initial_components: Iterable) -> bool:
    for proc in world.processes.values():
        if proc.leaving and proc.active:
            return False
        if not proc.leaving and not proc.active:
            return False
    current = weakly_connected_components(extract_relay_graph(world))
    membership = {}
    for i, comp in enumerate(current):
        for pid in comp:
            membership[pid] = i
    for component in initial_components:
        stayers = [pid for pid in component if not world.processes[pid].leaving]
        if len(stayers) <= 1:
            continue
        buckets = {membership.get(pid, ("missing", pid)) for pid in stayers}
        if len(buckets) != 1:
            return False
    return True


def stayers_connected(world: WorldState, initial_components: Iterable) -> bool:
    """Safety half of the departure problem, checkable at every step."""
    current = weakly_connected_components(extract_relay_graph(world))
    membership = {}
    for i, comp in enumerate(current):
        for pid in comp:
            membership[pid] = i
    for component in initial_components:
        stayers = [pid for pid in component if not world.processes[pid].leaving]
        if len(stayers) <= 1:
            continue
        buckets = {membership.get(pid, ("missing", pid)) for pid in stayers}
        if len(buckets) != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# DOT export: processes as boxes, relays as ellipses labeled
# "<|In|, id, direct?>", explicit edges solid, implicit dashed.


def _node_name(node) -> str:
    if node[0] == PROCESS:
        return f"p{node[1]}"
    rid = node[1]
    return f"r{rid.rid.value}_{rid.serial}"


def to_dot(world: WorldState, graph: Optional[RelayGraph] = None) -> str:
    g = graph or extract_relay_graph(world)
    lines = ["digraph relays {"]
    for node in sorted(g.vertices):
        if node[0] == PROCESS:
            lines.append(f'  {_node_name(node)} [shape=box label="{node[1]}"];')
        else:
            relay = world.find_relay(node[1])
            if relay is None:
                continue
            direct = "d" if relay.level <= 1 else "i"
            style = ' style=dotted' if not relay.alive else ""
            label = f"{len(relay.in_set)}, {_node_name(node)}, {direct}"
            lines.append(f'  {_node_name(node)} [shape=ellipse label="{label}"{style}];')
    for a, b in sorted(g.explicit_edges):
        lines.append(f"  {_node_name(a)} -> {_node_name(b)};")
    for a, b in sorted(g.implicit_edges):
        lines.append(f"  {_node_name(a)} -> {_node_name(b)} [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
