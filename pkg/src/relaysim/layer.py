"""Per-process relay layer: socket primitives, message handlers, repair loop.

One RelayLayer instance is a single logical actor.  Handlers execute
atomically against the layer's relay table and never interleave; all
cross-layer effects are queued as messages and moved by the simulated link
layer.  Every "arbitrary" choice in the protocol is resolved by the total
order on keys and relay ids so identical inputs yield identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .core import (
    RELAY_STATE_DEAD,
    ActionInvocation,
    Envelope,
    Header,
    InRelayClosed,
    Key,
    Message,
    NotAuthorized,
    OutRelayClosed,
    Ping,
    Probe,
    ProbeFail,
    Relay,
    RelayId,
    RelayParameter,
    RelayRef,
    Rid,
    Transmit,
    belongs_to,
    confirmed_entry,
    rid_of,
    unconfirmed_entry,
)


class IdSource:
    """Monotonic counter shared by all layers of one world (envelope uids)."""

    def __init__(self) -> None:
        self._next = 0

    def next(self) -> int:
        v = self._next
        self._next += 1
        return v


@dataclass(slots=True)
class OutEnvelope:
    """Layer-buffer entry: control message addressed to another layer."""

    uid: int
    target_rid: Rid
    message: Message


def message_carries_param_key(message: Message, key: Key) -> bool:
    """True if a relay parameter with `key` rides inside `message`."""
    if isinstance(message, Transmit):
        action = message.action
        if isinstance(action, ActionInvocation):
            return any(isinstance(p, RelayParameter) and p.key == key for p in action.params)
    return False


class RelayLayer:
    def __init__(self, rid: Rid, env_source: IdSource) -> None:
        self.rid = rid
        self.env_source = env_source
        self.relays: dict[RelayId, Relay] = {}
        self.layer_buf: list[OutEnvelope] = []
        self.owner_alive = True
        self.shut_down = False
        self._id_serial = 0
        self._key_serial = 0
        # (event, relay_id) log; "internal_delete" entries back the
        # deliberate-application guard checks in the test harness.
        self.events: list = []

    # -- minting -----------------------------------------------------------

    def mint_relay_id(self) -> RelayId:
        self._id_serial += 1
        return RelayId(self.rid, self._id_serial)

    def mint_key(self) -> Key:
        self._key_serial += 1
        return Key(self.rid, self._key_serial)

    # -- emission ----------------------------------------------------------

    def _emit_buf(self, relay: Relay, message: Message) -> None:
        relay.buf.append(Envelope(self.env_source.next(), message))

    def _emit_control(self, target: Rid, message: Message) -> None:
        self.layer_buf.append(OutEnvelope(self.env_source.next(), target, message))

    # -- primitives --------------------------------------------------------

    def new_relay(self) -> Optional[RelayRef]:
        if not self.owner_alive:
            return None
        relay = Relay(id=self.mint_relay_id(), sink_rid=self.rid)
        self.relays[relay.id] = relay
        return RelayRef(relay.id)

    def _resolve(self, ref: Optional[RelayRef]) -> Optional[Relay]:
        if ref is None:
            return None
        relay = self.relays.get(ref.relay_id)
        if relay is None or relay.id.rid != self.rid:
            return None
        return relay

    def delete_relay(self, ref: RelayRef) -> None:
        if not self.owner_alive:
            return
        relay = self._resolve(ref)
        if relay is not None:
            self._delete(relay, internal=False)

    def merge(self, refs: Iterable[RelayRef]) -> Optional[RelayRef]:
        if not self.owner_alive:
            return None
        relays = sorted(
            {r.id: r for r in (self._resolve(ref) for ref in refs) if r is not None}.values(),
            key=lambda r: r.id,
        )
        if not relays:
            return None
        first = relays[0]
        if first.out_id is None:
            return None
        for r in relays:
            if not (
                r.alive
                and r.out_id == first.out_id
                and r.level == first.level
                and r.sink_rid == first.sink_rid
                and not r.in_set
            ):
                return None
        merged = Relay(
            id=self.mint_relay_id(),
            out_keys=set().union(*(r.out_keys for r in relays)),
            out_id=first.out_id,
            level=first.level,
            sink_rid=first.sink_rid,
        )
        originals = {r.id for r in relays}
        for r in relays:
            # Buffers and keys move to the merged relay; the originals stay
            # as drained tombstones until the repair loop collects them.
            merged.buf.extend(r.buf)
            r.buf = []
            r.out_keys = set()
            self._delete(r, internal=False)
        # Announcements routed via an original are now carried by the heir,
        # so their entries must point there for confirmation and probing.
        for holder in self.relays.values():
            moved = {e for e in holder.in_set if not e.confirmed and e.via in originals}
            if moved:
                holder.in_set -= moved
                holder.in_set |= {unconfirmed_entry(e.key, merged.id) for e in moved}
        self.relays[merged.id] = merged
        return RelayRef(merged.id)

    def get_relays(self) -> list[RelayRef]:
        return [RelayRef(r.id) for r in sorted(self.relays.values(), key=lambda r: r.id) if r.alive]

    def incoming(self, ref: RelayRef) -> int:
        relay = self._resolve(ref)
        return len(relay.in_set) if relay is not None else 0

    def direct(self, ref: RelayRef) -> bool:
        relay = self._resolve(ref)
        return relay is not None and relay.level <= 1

    def is_sink(self, ref: RelayRef) -> bool:
        relay = self._resolve(ref)
        return relay is not None and relay.level == 0

    def dead(self, ref: RelayRef) -> bool:
        relay = self._resolve(ref)
        return relay is None or not relay.alive

    def same_target(self, ref_a: RelayRef, ref_b: RelayRef) -> bool:
        a, b = self._resolve(ref_a), self._resolve(ref_b)
        return a is not None and b is not None and a.out_id == b.out_id

    def send(self, ref: RelayRef, action: ActionInvocation) -> None:
        if not self.owner_alive:
            return
        relay = self._resolve(ref)
        if relay is None or not relay.alive:
            return
        if relay.out_id is None:
            # Sink: local delivery, references pass through unserialized.
            self._emit_buf(relay, action)
            return
        if not relay.out_keys:
            # No key can head the message; the relay is invalid and the
            # repair loop will delete it.  Dropping avoids dangling In
            # entries that nothing could ever confirm.
            return
        params = list(action.params)
        for i in action.relay_positions:
            if i >= len(params) or not isinstance(params[i], RelayRef):
                continue
            target = self._resolve(params[i])
            if target is None or not target.alive:
                params[i] = None
                continue
            key = self.mint_key()
            target.in_set.add(unconfirmed_entry(key, relay.id))
            params[i] = RelayParameter(key, target.id, target.level + 1, target.sink_rid)
        key = min(relay.out_keys)
        header = Header(key, relay.id, relay.out_id, relay.level)
        self._emit_buf(relay, Transmit(header, ActionInvocation(action.label, tuple(params), action.relay_positions)))

    def stop_process(self) -> None:
        if not self.owner_alive:
            return
        self.owner_alive = False
        for relay in sorted(self.relays.values(), key=lambda r: r.id):
            if relay.alive and relay.out_id is None:
                self._delete(relay, internal=False)

    # -- internal delete (shared by primitives and handlers) ----------------

    def _delete(self, relay: Relay, internal: bool = True) -> None:
        if internal and relay.alive:
            self.events.append(("internal_delete", relay.id))
        relay.state = RELAY_STATE_DEAD
        for rid in sorted({e.from_rid for e in relay.in_set if e.confirmed}):
            self._emit_control(rid, OutRelayClosed(relay.id))
        relay.in_set.clear()

    def _purge_unconfirmed_via(self, via: Relay) -> None:
        for r in self.relays.values():
            stale = {e for e in r.in_set if not e.confirmed and e.via == via.id}
            r.in_set -= stale

    # -- header validity (local data only) -----------------------------------

    def header_valid_for(self, relay: Relay, header: Header) -> bool:
        if relay.id != header.out_id:
            return False
        sender = rid_of(header.in_id)
        for e in relay.in_set:
            if e.key != header.key:
                continue
            if e.confirmed:
                if e.from_rid == sender:
                    return True
            else:
                via = self.relays.get(e.via)
                if via is not None and via.sink_rid == sender:
                    return True
        return False

    # -- message dispatch ----------------------------------------------------

    def receive(self, message: Message) -> None:
        if isinstance(message, Transmit):
            self.handle_transmit(message)
        elif isinstance(message, ProbeFail):
            self.handle_probefail(message.key, message.key_sequence)
        elif isinstance(message, NotAuthorized):
            self.handle_notauthorized(message.original)
        elif isinstance(message, Ping):
            self.handle_ping(message.id, message.level, message.sink_rid, message.key)
        elif isinstance(message, InRelayClosed):
            self.handle_inrelayclosed(message.keys, message.sender_rid, message.target_id)
        elif isinstance(message, OutRelayClosed):
            self.handle_outrelayclosed(message.id)
        # anything else is not an internal message and is ignored

    # -- transmit ------------------------------------------------------------

    def handle_transmit(self, m: Transmit) -> None:
        header = m.header
        relay = self.relays.get(header.out_id)
        if relay is not None and relay.alive and self.header_valid_for(relay, header):
            self._activate_connection(relay, header)
            if relay.out_id is None:
                self._sink_receipt(relay, m)
            else:
                self._forward(relay, m)
            return
        if relay is not None and relay.alive:
            self._emit_control(rid_of(header.in_id), NotAuthorized(m))
            return
        if rid_of(header.out_id) == self.rid:
            self._emit_control(rid_of(header.in_id), OutRelayClosed(header.out_id))

    def _activate_connection(self, relay: Relay, header: Header) -> None:
        # First message over a fresh connection confirms the announced key.
        sender = rid_of(header.in_id)
        for e in relay.sorted_in():
            if e.confirmed or e.key != header.key:
                continue
            via = self.relays.get(e.via)
            if via is not None and via.sink_rid == sender:
                relay.in_set.discard(e)
                relay.in_set.add(confirmed_entry(header.key, sender))
                return

    def _sink_receipt(self, relay: Relay, m: Transmit) -> None:
        action = m.action
        if isinstance(action, Probe):
            for control_key in sorted(action.control_keys):
                if any(control_key in r.out_keys for r in self.relays.values()):
                    continue
                if not action.key_sequence:
                    continue
                last = action.key_sequence[-1]
                for e in relay.sorted_in():
                    if e.key == last and e.confirmed:
                        self._emit_control(e.from_rid, ProbeFail(control_key, action.key_sequence))
                        break
            return
        if not isinstance(action, ActionInvocation):
            return
        params = list(action.params)
        incoming = [(i, params[i]) for i in action.relay_positions
                    if i < len(params) and isinstance(params[i], RelayParameter)]
        if len({p.id.rid for _, p in incoming}) > 1:
            return  # ids from several layers: obviously corrupted
        for i, p in incoming:
            if any(p.key in r.out_keys for r in self.relays.values()):
                params[i] = None
                continue
            relay_in = Relay(
                id=self.mint_relay_id(),
                out_keys={p.key},
                out_id=p.id,
                level=p.level,
                sink_rid=p.sink_rid,
            )
            self.relays[relay_in.id] = relay_in
            activation = Transmit(
                Header(p.key, relay_in.id, p.id, relay_in.level),
                Probe(frozenset(), (p.key,)),
            )
            self._emit_buf(relay_in, activation)
            params[i] = RelayRef(relay_in.id)
        self._emit_buf(relay, ActionInvocation(action.label, tuple(params), action.relay_positions))

    def _forward(self, relay: Relay, m: Transmit) -> None:
        if not relay.out_keys:
            return  # header cannot be rewritten; repair loop deletes this relay
        new_key = min(relay.out_keys)
        action = m.action
        if isinstance(action, Probe):
            sequence = action.key_sequence + (new_key,)
            controls = frozenset(
                k for k in action.control_keys
                if not any(message_carries_param_key(env.message, k) for env in relay.buf)
            )
            action = Probe(controls, sequence)
        self._emit_buf(relay, Transmit(Header(new_key, relay.id, relay.out_id, relay.level), action))

    # -- probe failure ---------------------------------------------------------

    def handle_probefail(self, key: Key, key_sequence: tuple) -> None:
        if not key_sequence:
            return
        last = key_sequence[-1]
        holder = None
        for r in sorted(self.relays.values(), key=lambda r: r.id):
            if last in r.out_keys:
                holder = r
                break
        if holder is None:
            return
        if len(key_sequence) > 1:
            prev = key_sequence[-2]
            for e in holder.sorted_in():
                if e.key == prev and e.confirmed:
                    self._emit_control(e.from_rid, ProbeFail(key, key_sequence[:-1]))
                    return
        else:
            for r in sorted(self.relays.values(), key=lambda r: r.id):
                entry = next((e for e in r.sorted_in() if not e.confirmed and e.key == key and e.via == holder.id), None)
                if entry is not None:
                    r.in_set.discard(entry)
                    return

    # -- not authorized ---------------------------------------------------------

    def handle_notauthorized(self, original: Transmit) -> None:
        h = original.header
        relay = self.relays.get(h.in_id)
        if relay is None or relay.out_id is None or relay.out_id != h.out_id:
            return
        if relay.level != h.level or h.key not in relay.out_keys:
            return
        relay.out_keys.discard(h.key)
        if relay.out_keys:
            new_key = min(relay.out_keys)
            self._emit_buf(relay, Transmit(Header(new_key, h.in_id, h.out_id, h.level), original.action))
        else:
            # Outgoing link is broken: drop announcements pending via this
            # relay, then close it.
            self._purge_unconfirmed_via(relay)
            self._delete(relay)

    # -- ping ---------------------------------------------------------------------

    def handle_ping(self, id: RelayId, level: int, sink_rid: Rid, key: Key) -> None:
        if id is None:
            return
        holder = None
        for r in sorted(self.relays.values(), key=lambda r: r.id):
            if r.out_id == id and key in r.out_keys:
                holder = r
                break
        if holder is not None:
            holder.sink_rid = sink_rid
            if holder.level > level + 1:
                holder.level = level + 1
            if holder.level < level + 1:
                # raising the level could close a relay cycle, so delete
                self._delete(holder)
        else:
            self._emit_control(rid_of(id), InRelayClosed(frozenset({key}), self.rid, id))

    # -- in/out relay closed --------------------------------------------------------

    def handle_inrelayclosed(self, keys: frozenset, sender_rid: Rid, target_id: RelayId) -> None:
        for key in sorted(keys):
            for r in self.relays.values():
                gone = {e for e in r.in_set if e.confirmed and e.key == key}
                r.in_set -= gone

    def handle_outrelayclosed(self, id: RelayId) -> None:
        for relay in sorted(self.relays.values(), key=lambda r: r.id):
            if relay.out_id != id:
                continue
            self._purge_unconfirmed_via(relay)
            relay.out_keys.clear()
            relay.out_id = None
            self._delete(relay)

    # -- repair loop -------------------------------------------------------------------

    def timeout(self) -> None:
        """Periodically executed self-repair; guard is always true."""
        # Key multiplicity snapshot: duplicated In keys are purged everywhere.
        key_count: dict[Key, int] = {}
        for r in self.relays.values():
            for e in r.in_set:
                key_count[e.key] = key_count.get(e.key, 0) + 1

        for relay in sorted(list(self.relays.values()), key=lambda r: r.id):
            if relay.id not in self.relays:
                continue
            if relay.out_id is None:
                relay.level = 0
                relay.sink_rid = self.rid
            elif relay.level < 1:
                relay.level = 1
            if relay.out_id is None and relay.out_keys:
                relay.out_keys.clear()
            if relay.out_id is not None and not relay.out_keys:
                # Keyless non-sink: the outgoing link is unusable, exactly
                # the exhaustion case of the not-authorized handler, so
                # announcements via this relay can never be probed again.
                # Entries whose announcing message still sits in the buffer
                # are kept: the far side will confirm them on delivery.
                for r in self.relays.values():
                    stale = {
                        e
                        for e in r.in_set
                        if not e.confirmed
                        and e.via == relay.id
                        and not any(message_carries_param_key(env.message, e.key) for env in relay.buf)
                    }
                    r.in_set -= stale
                if relay.alive:
                    self._delete(relay)
            bad = {e for e in relay.in_set if key_count.get(e.key, 0) > 1 or not belongs_to(e.key, self.rid)}
            relay.in_set -= bad
            for e in relay.sorted_in():
                if e.confirmed:
                    self._emit_control(e.from_rid, Ping(relay.id, relay.level, relay.sink_rid, e.key))
            dangling = {e for e in relay.in_set if not e.confirmed and e.via not in self.relays}
            relay.in_set -= dangling

            pending_via = any(
                not e.confirmed and e.via == relay.id
                for r in self.relays.values()
                for e in r.in_set
            )
            if not relay.alive and not pending_via and not relay.buf:
                # Removal waits for the buffer: a deleted relay keeps
                # delivering what was already sent through it.
                if relay.out_id is None:
                    self._delete(relay)
                    del self.relays[relay.id]
                    continue
                # Keys inherited by an alive relay (merge) are still in use
                # and must not be revoked on the tombstone's behalf.
                closed = frozenset(
                    k
                    for k in relay.out_keys
                    if not any(o.alive and k in o.out_keys for o in self.relays.values())
                )
                if closed:
                    self._emit_control(
                        rid_of(relay.out_id),
                        InRelayClosed(closed, self.rid, relay.out_id),
                    )
                del self.relays[relay.id]
                continue
            if (
                not self.owner_alive
                and relay.alive
                and not relay.in_set
                and not relay.buf
                and not pending_via
            ):
                self._delete(relay)
            if relay.alive and relay.out_keys:
                # Out-key collisions are resolved between alive relays only;
                # a merge tombstone legitimately shares keys with its heir.
                for other in self.relays.values():
                    if other.alive and other.id > relay.id and other.out_keys & relay.out_keys:
                        self._delete(relay)
                        break
            controls = frozenset(
                e.key
                for r in self.relays.values()
                for e in r.in_set
                if not e.confirmed
                and e.via == relay.id
                and not any(message_carries_param_key(env.message, e.key) for env in relay.buf)
            )
            # Alive relays probe while their owner lives or keys may still
            # arrive.  A dead relay probes only while announcements made via
            # it are unresolved: probing any longer would keep refilling its
            # buffer and prevent its own collection, probing any less would
            # strand the announcements of a stopped process.
            if controls or (relay.alive and (self.owner_alive or relay.in_set)):
                for key in relay.sorted_out_keys():
                    self._emit_buf(
                        relay,
                        Transmit(Header(key, relay.id, relay.out_id, relay.level), Probe(controls, (key,))),
                    )

        if not self.owner_alive and not self.relays:
            self.shut_down = True
