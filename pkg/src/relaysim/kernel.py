"""Deterministic discrete-event execution of relay layers.

The kernel owns the world: processes, their relay layers, and every message
still in some buffer.  One step executes exactly one enabled action, chosen
by a seeded weakly fair scheduler: a layer timeout, a single message
delivery (non-FIFO, any buffered message may go next), or one application
action.  Same seed, same scenario, same state sequence.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    ActionInvocation,
    Envelope,
    Key,
    Message,
    Relay,
    RelayId,
    RelayRef,
    Rid,
    Transmit,
    Header,
    InRelayClosed,
    NotAuthorized,
    OutRelayClosed,
    Ping,
    Probe,
    ProbeFail,
    RelayParameter,
    confirmed_entry,
    message_json,
    relay_json,
    unconfirmed_entry,
)
from .layer import IdSource, OutEnvelope, RelayLayer

MODE_RANDOM = "random"
MODE_ROUND_ROBIN = "round_robin"


def derive_seed(*parts) -> int:
    """Stable cross-process seed derivation (str hashing is randomized)."""
    blob = ":".join(map(str, parts)).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


@dataclass(slots=True)
class ProcessState:
    pid: int
    leaving: bool = False
    active: bool = True
    app: Optional[object] = None
    store: dict = field(default_factory=dict)


@dataclass(slots=True)
class RunResult:
    steps: int
    reached: bool


class ProcessContext:
    """Primitive access handed to application code; one process, one layer."""

    def __init__(self, world: "WorldState", pid: int) -> None:
        self.world = world
        self.pid = pid

    @property
    def rid(self) -> Rid:
        return Rid(self.pid)

    @property
    def _layer(self) -> Optional[RelayLayer]:
        return self.world.layers.get(Rid(self.pid))

    @property
    def process(self) -> ProcessState:
        return self.world.processes[self.pid]

    @property
    def store(self) -> dict:
        return self.process.store

    @property
    def leaving(self) -> bool:
        return self.process.leaving

    @property
    def rng(self) -> random.Random:
        return self.world.process_rngs[self.pid]

    def new_relay(self) -> Optional[RelayRef]:
        layer = self._layer
        return layer.new_relay() if layer else None

    def delete_relay(self, ref: RelayRef) -> None:
        if self._layer:
            self._layer.delete_relay(ref)

    def merge(self, refs) -> Optional[RelayRef]:
        layer = self._layer
        return layer.merge(refs) if layer else None

    def get_relays(self) -> list:
        layer = self._layer
        return layer.get_relays() if layer else []

    def incoming(self, ref: RelayRef) -> int:
        layer = self._layer
        return layer.incoming(ref) if layer else 0

    def direct(self, ref: RelayRef) -> bool:
        layer = self._layer
        return layer.direct(ref) if layer else False

    def is_sink(self, ref: RelayRef) -> bool:
        layer = self._layer
        return layer.is_sink(ref) if layer else False

    def dead(self, ref: RelayRef) -> bool:
        layer = self._layer
        return layer.dead(ref) if layer else True

    def same_target(self, a: RelayRef, b: RelayRef) -> bool:
        layer = self._layer
        return layer.same_target(a, b) if layer else False

    def send(self, ref: RelayRef, label: str, params: tuple = (), relay_positions: tuple = ()) -> None:
        if self._layer:
            self._layer.send(ref, ActionInvocation(label, params, relay_positions))

    def stop(self) -> None:
        self.process.active = False
        if self._layer:
            self._layer.stop_process()


class WorldState:
    def __init__(self, seed: int, fairness_bound: int = 64, mode: str = MODE_RANDOM) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.fairness_bound = fairness_bound
        self.mode = mode
        self.env_source = IdSource()
        self.processes: dict[int, ProcessState] = {}
        self.layers: dict[Rid, RelayLayer] = {}
        self.orphan_out: list[OutEnvelope] = []
        self.process_rngs: dict[int, random.Random] = {}
        self.step_count = 0
        self.trace: Optional[list] = None
        self._birth: dict[int, int] = {}
        self._last_timeout: dict[Rid, int] = {}
        self._last_app: dict[int, int] = {}

    # -- construction ------------------------------------------------------

    def add_process(self, leaving: bool = False, app: Optional[object] = None) -> int:
        pid = len(self.processes)
        rid = Rid(pid)
        self.processes[pid] = ProcessState(pid=pid, leaving=leaving, app=app)
        self.layers[rid] = RelayLayer(rid, self.env_source)
        self.process_rngs[pid] = random.Random(derive_seed(self.seed, "proc", pid))
        return pid

    def ctx(self, pid: int) -> ProcessContext:
        return ProcessContext(self, pid)

    def layer_of(self, pid: int) -> Optional[RelayLayer]:
        return self.layers.get(Rid(pid))

    # -- enabled actions ----------------------------------------------------

    def enabled_actions(self) -> list:
        actions = []
        for rid in self.layers:
            actions.append(("timeout", rid))
        for pid, proc in self.processes.items():
            if proc.active and proc.app is not None:
                actions.append(("app", pid))
        for rid, layer in self.layers.items():
            for relay in layer.relays.values():
                for env in relay.buf:
                    actions.append(("relay", rid, relay.id, env.uid))
            for env in layer.layer_buf:
                actions.append(("layer", rid, env.uid))
        for env in self.orphan_out:
            actions.append(("orphan", env.uid))
        return actions

    def _action_age(self, action) -> int:
        kind = action[0]
        if kind == "timeout":
            return self.step_count - self._last_timeout.get(action[1], 0)
        if kind == "app":
            return self.step_count - self._last_app.get(action[1], 0)
        uid = action[-1]
        born = self._birth.setdefault(uid, self.step_count)
        return self.step_count - born

    def step(self) -> None:
        actions = self.enabled_actions()
        if not actions:
            self.step_count += 1
            return
        max_age = -1
        oldest: list = []
        for a in actions:
            age = self._action_age(a)
            if age > max_age:
                max_age = age
                oldest = [a]
            elif age == max_age:
                oldest.append(a)
        if self.mode == MODE_ROUND_ROBIN or max_age > self.fairness_bound:
            chosen = max(oldest, key=_action_sort_key) if len(oldest) > 1 else oldest[0]
        else:
            chosen = actions[self.rng.randrange(len(actions))]
        self._execute(chosen)
        self.step_count += 1
        if self.step_count % 1024 == 0:
            self._prune_birth()

    def _prune_birth(self) -> None:
        live = {a[-1] for a in self.enabled_actions() if a[0] in ("relay", "layer", "orphan")}
        self._birth = {uid: born for uid, born in self._birth.items() if uid in live}

    def _execute(self, action) -> None:
        kind = action[0]
        if kind == "timeout":
            rid = action[1]
            layer = self.layers[rid]
            layer.timeout()
            self._last_timeout[rid] = self.step_count
            if layer.shut_down:
                self.orphan_out.extend(layer.layer_buf)
                layer.layer_buf.clear()
                del self.layers[rid]
            self._trace(kind, rid.value, "")
            return
        if kind == "app":
            pid = action[1]
            proc = self.processes[pid]
            if proc.active and proc.app is not None:
                proc.app.on_tick(self.ctx(pid))
            self._last_app[pid] = self.step_count
            self._trace(kind, pid, "")
            return
        if kind == "relay":
            _, rid, relay_id, uid = action
            layer = self.layers[rid]
            relay = layer.relays[relay_id]
            env = _pop_envelope(relay.buf, uid)
            self._birth.pop(uid, None)
            self._trace(kind, rid.value, message_digest(env.message))
            if relay.out_id is None:
                self._deliver_local(rid, relay, env.message)
            else:
                target = self.layers.get(env_target := relay.out_id.rid)
                if target is not None:
                    target.receive(env.message)
            return
        if kind == "layer":
            _, rid, uid = action
            layer = self.layers[rid]
            env = _pop_out_envelope(layer.layer_buf, uid)
            self._birth.pop(uid, None)
            self._trace(kind, rid.value, message_digest(env.message))
            target = self.layers.get(env.target_rid)
            if target is not None:
                target.receive(env.message)
            return
        if kind == "orphan":
            uid = action[1]
            env = _pop_out_envelope(self.orphan_out, uid)
            self._birth.pop(uid, None)
            self._trace(kind, env.target_rid.value, message_digest(env.message))
            target = self.layers.get(env.target_rid)
            if target is not None:
                target.receive(env.message)
            return

    def _deliver_local(self, rid: Rid, relay: Relay, message: Message) -> None:
        # Sink buffers deliver to the owning process; everything that is not
        # an application invocation is dropped there.
        if not isinstance(message, ActionInvocation):
            return
        proc = self.processes.get(rid.value)
        if proc is None or not proc.active or proc.app is None:
            return
        proc.app.on_message(self.ctx(proc.pid), message, RelayRef(relay.id))

    def _trace(self, kind: str, actor: int, digest: str) -> None:
        if self.trace is not None:
            self.trace.append(f"{self.step_count} {kind} {actor} {digest}")

    # -- predicates / inspection ---------------------------------------------

    def run_until(self, predicate: Callable[["WorldState"], bool], max_steps: int) -> RunResult:
        for i in range(max_steps):
            if predicate(self):
                return RunResult(i, True)
            self.step()
        return RunResult(max_steps, predicate(self))

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    def all_messages(self):
        """Yield (location, message) for every buffered message.

        Locations: ("relay", relay_id), ("layer", rid), ("orphan", None).
        """
        for rid, layer in self.layers.items():
            for relay in layer.relays.values():
                for env in relay.buf:
                    yield ("relay", relay.id), env.message
            for env in layer.layer_buf:
                yield ("layer", rid), env.message
        for env in self.orphan_out:
            yield ("orphan", None), env.message

    def is_settled(self) -> bool:
        """No transient protocol work left: only steady-state noise remains.

        Settled worlds may still carry pings and control-free probes (the
        repair loop emits those forever); everything else - unconfirmed
        entries, dead relays, application payloads in transit, teardown
        notifications - must have drained.
        """
        for layer in self.layers.values():
            for relay in layer.relays.values():
                if not relay.alive:
                    return False
                if any(not e.confirmed for e in relay.in_set):
                    return False
                for env in relay.buf:
                    msg = env.message
                    if (
                        not isinstance(msg, Transmit)
                        or not isinstance(msg.action, Probe)
                        or msg.action.control_keys
                    ):
                        return False
            for env in layer.layer_buf:
                if not isinstance(env.message, Ping):
                    return False
        for env in self.orphan_out:
            if not isinstance(env.message, Ping):
                return False
        return True

    def find_relay(self, relay_id: RelayId) -> Optional[Relay]:
        layer = self.layers.get(relay_id.rid)
        if layer is None:
            return None
        return layer.relays.get(relay_id)

    def world_json(self) -> dict:
        return {
            "step": self.step_count,
            "processes": {
                str(pid): {"leaving": p.leaving, "active": p.active}
                for pid, p in sorted(self.processes.items())
            },
            "layers": {
                str(rid.value): {
                    "ownerAlive": layer.owner_alive,
                    "relays": [relay_json(r) for r in sorted(layer.relays.values(), key=lambda r: r.id)],
                    "Buf": [
                        [env.target_rid.value, message_json(env.message)]
                        for env in layer.layer_buf
                    ],
                }
                for rid, layer in sorted(self.layers.items())
            },
            "orphans": [[env.target_rid.value, message_json(env.message)] for env in self.orphan_out],
        }

    def state_hash(self) -> str:
        blob = json.dumps(self.world_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _action_sort_key(action) -> tuple:
    # Order only matters for deterministic tie-breaks among equally starved
    # actions; invert nothing, just give every action a total order.
    kind = action[0]
    if kind == "timeout":
        return (0, action[1].value, 0)
    if kind == "app":
        return (1, action[1], 0)
    if kind == "relay":
        return (2, action[1].value, action[3])
    if kind == "layer":
        return (3, action[1].value, action[2])
    return (4, action[1], 0)


def _pop_envelope(buf: list, uid: int) -> Envelope:
    for i, env in enumerate(buf):
        if env.uid == uid:
            return buf.pop(i)
    raise KeyError(uid)


def _pop_out_envelope(buf: list, uid: int) -> OutEnvelope:
    for i, env in enumerate(buf):
        if env.uid == uid:
            return buf.pop(i)
    raise KeyError(uid)


def message_digest(message: Message) -> str:
    blob = json.dumps(message_json(message), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:10]


# ---------------------------------------------------------------------------
# World builders.


def new_world(seed: int, n_processes: int, fairness_bound: int = 64, mode: str = MODE_RANDOM) -> WorldState:
    world = WorldState(seed, fairness_bound=fairness_bound, mode=mode)
    for _ in range(n_processes):
        world.add_process()
    return world


def give_door(world: WorldState, pid: int) -> RelayRef:
    """Create (or return) the process's designated inbound sink relay."""
    store = world.processes[pid].store
    if "door" not in store:
        store["door"] = world.layer_of(pid).new_relay()
    return store["door"]


def connect(world: WorldState, u: int, target_relay_id: RelayId) -> RelayRef:
    """Wire a confirmed connection: a new relay of `u` feeding `target_relay_id`.

    Builds the post-handshake shape directly: the target's layer mints the
    key, registers it as confirmed from `u`, and `u` holds it as the single
    outgoing key.  Only valid on existing alive targets.
    """
    target_layer = world.layers[target_relay_id.rid]
    target = target_layer.relays[target_relay_id]
    key = target_layer.mint_key()
    target.in_set.add(confirmed_entry(key, Rid(u)))
    layer = world.layer_of(u)
    relay = Relay(
        id=layer.mint_relay_id(),
        out_keys={key},
        out_id=target.id,
        level=target.level + 1,
        sink_rid=target.sink_rid,
    )
    layer.relays[relay.id] = relay
    return RelayRef(relay.id)


def connect_door(world: WorldState, u: int, v: int) -> RelayRef:
    """Confirmed direct connection from `u` to `v`'s door sink."""
    door = give_door(world, v)
    return connect(world, u, door.relay_id)


def fig_triangle(valid: bool = True, seed: int = 0) -> WorldState:
    """Three processes u, v, w: v owns a sink r; relays q (at u) and p (at w) feed r.

    With ``valid=False`` the relay q carries a wrong level, which makes it
    indirect-looking and breaks its validity; graph extraction is unaffected.
    """
    world = new_world(seed, 3)
    u, v, w = 0, 1, 2
    r_ref = give_door(world, v)
    q_ref = connect(world, u, r_ref.relay_id)
    p_ref = connect(world, w, r_ref.relay_id)
    world.processes[u].store["out"] = q_ref
    world.processes[w].store["out"] = p_ref
    if not valid:
        world.layer_of(u).relays[q_ref.relay_id].level = 2
    return world


def random_connected_world(
    seed: int,
    n_processes: int,
    extra_edges: int = 2,
    chains: int = 1,
) -> WorldState:
    """Legal, weakly connected world: spanning tree plus extras and chains."""
    rng = random.Random(seed)
    world = new_world(seed, n_processes)
    for pid in range(n_processes):
        give_door(world, pid)
    edge_refs = {}
    for pid in range(1, n_processes):
        parent = rng.randrange(pid)
        edge_refs[(pid, parent)] = connect_door(world, pid, parent)
    for _ in range(extra_edges):
        u, v = rng.randrange(n_processes), rng.randrange(n_processes)
        if u != v:
            edge_refs[(u, v)] = connect_door(world, u, v)
    for _ in range(chains):
        # A second-hop relay feeding an existing non-sink relay.
        candidates = [
            (pid, ref) for (pid, _), ref in sorted(edge_refs.items(), key=lambda kv: kv[0])
        ]
        if not candidates:
            break
        owner, ref = candidates[rng.randrange(len(candidates))]
        hopper = rng.randrange(n_processes)
        if hopper != owner:
            connect(world, hopper, ref.relay_id)
    return world


# ---------------------------------------------------------------------------
# Adversarial initial states.

CORRUPTION_PROFILES = ("none", "mixed")


def adversarial_init(
    seed: int,
    n_processes: int,
    n_relays: int,
    n_messages: int,
    corruption_profile: str = "mixed",
    fairness_bound: int = 64,
    mode: str = MODE_RANDOM,
) -> WorldState:
    """Seeded initial state: all processes active, finitely many messages,
    every identifier resolving to an existing process, everything else fair
    game for corruption."""
    if corruption_profile not in CORRUPTION_PROFILES:
        raise ValueError(f"unknown corruption profile: {corruption_profile}")
    rng = random.Random(derive_seed(seed, corruption_profile))
    world = new_world(seed, n_processes, fairness_bound=fairness_bound, mode=mode)
    for pid in range(n_processes):
        give_door(world, pid)
    budget = max(0, n_relays - n_processes)
    connections = []
    for pid in range(1, n_processes):
        if budget <= 0:
            break
        connections.append(connect_door(world, pid, rng.randrange(pid)))
        budget -= 1
    while budget > 0:
        u, v = rng.randrange(n_processes), rng.randrange(n_processes)
        if u != v:
            connections.append(connect_door(world, u, v))
        budget -= 1
    if corruption_profile == "none":
        return world
    _corrupt(world, rng, n_messages)
    return world


def _random_relay(world: WorldState, rng: random.Random) -> Relay:
    pool = [r for layer in world.layers.values() for r in layer.relays.values()]
    return pool[rng.randrange(len(pool))]


def _fabricated_id(world: WorldState, rng: random.Random) -> RelayId:
    # Valid rid (existing process), relay that does not exist.
    rid = Rid(rng.randrange(len(world.processes)))
    return RelayId(rid, 900 + rng.randrange(100))


def _some_key(world: WorldState, rng: random.Random) -> Key:
    layer = world.layers[Rid(rng.randrange(len(world.processes)))]
    return layer.mint_key()

def _corrupt(world: WorldState, rng: random.Random, n_messages: int) -> None:
    n = len(world.processes)
    relays = [r for layer in world.layers.values() for r in layer.relays.values()]
    for relay in relays:
        roll = rng.random()
        if roll < 0.25:
            relay.level = rng.randrange(5)
        elif roll < 0.4:
            relay.sink_rid = Rid(rng.randrange(n))
        if rng.random() < 0.2:
            # Foreign or duplicated key in the In set.
            key = _some_key(world, rng)
            relay.in_set.add(confirmed_entry(key, Rid(rng.randrange(n))))
        if rng.random() < 0.2:
            # Unconfirmed entry announced via a dangling id or an existing
            # local non-sink relay.  A sink can never be the announcing
            # relay (local sends serialize nothing), and nothing could ever
            # probe such an entry away.
            layer = world.layers[relay.id.rid]
            local_nonsinks = [r for r in layer.relays.values() if r.out_id is not None]
            if local_nonsinks and rng.random() < 0.5:
                via = local_nonsinks[rng.randrange(len(local_nonsinks))].id
            else:
                via = RelayId(relay.id.rid, 900 + rng.randrange(100))
            relay.in_set.add(unconfirmed_entry(layer.mint_key(), via))
        if rng.random() < 0.15 and relay.out_id is not None:
            relay.out_keys.clear()
        if rng.random() < 0.1:
            relay.state = "dead"

    # A relay aimed at a fabricated target, and one two-relay cycle.
    for _ in range(2):
        owner = rng.randrange(n)
        layer = world.layer_of(owner)
        ghost = Relay(
            id=layer.mint_relay_id(),
            out_keys={layer.mint_key()},
            out_id=_fabricated_id(world, rng),
            level=1 + rng.randrange(3),
            sink_rid=Rid(rng.randrange(n)),
        )
        layer.relays[ghost.id] = ghost
    if n >= 2:
        la, lb = world.layer_of(0), world.layer_of(1)
        ka, kb = la.mint_key(), lb.mint_key()
        a = Relay(id=la.mint_relay_id(), out_keys={kb}, level=1, sink_rid=Rid(0))
        b = Relay(id=lb.mint_relay_id(), out_keys={ka}, level=1, sink_rid=Rid(1))
        a.out_id, b.out_id = b.id, a.id
        a.in_set.add(confirmed_entry(ka, Rid(1)))
        b.in_set.add(confirmed_entry(kb, Rid(0)))
        la.relays[a.id] = a
        lb.relays[b.id] = b

    relays = [r for layer in world.layers.values() for r in layer.relays.values()]
    for _ in range(n_messages):
        kind = rng.randrange(6)
        target = Rid(rng.randrange(n))
        layer = world.layers[target]
        if kind == 0:
            layer._emit_control(target, Ping(_fabricated_id(world, rng), rng.randrange(4), Rid(rng.randrange(n)), _some_key(world, rng)))
        elif kind == 1:
            layer._emit_control(target, ProbeFail(_some_key(world, rng), (_some_key(world, rng),)))
        elif kind == 2:
            layer._emit_control(target, InRelayClosed(frozenset({_some_key(world, rng)}), Rid(rng.randrange(n)), _fabricated_id(world, rng)))
        elif kind == 3:
            layer._emit_control(target, OutRelayClosed(_fabricated_id(world, rng)))
        elif kind == 4:
            relay = relays[rng.randrange(len(relays))]
            header = Header(_some_key(world, rng), _fabricated_id(world, rng), relay.id, rng.randrange(4))
            layer._emit_control(target, NotAuthorized(Transmit(header, ActionInvocation("noise", ()))))
        else:
            relay = relays[rng.randrange(len(relays))]
            if relay.out_id is None:
                continue
            header = Header(_some_key(world, rng), relay.id, relay.out_id, relay.level)
            params: tuple = ()
            positions: tuple = ()
            if rng.random() < 0.5:
                param = RelayParameter(_some_key(world, rng), _fabricated_id(world, rng), 1 + rng.randrange(3), Rid(rng.randrange(n)))
                params, positions = (param,), (0,)
            world.layers[relay.id.rid]._emit_buf(relay, Transmit(header, ActionInvocation("noise", params, positions)))
