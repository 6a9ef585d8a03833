"""Application-layer actors used by the property suites.

The random application is deliberate: it never deletes a relay that still
has incoming keys and never calls stop.  In "direct" mode it also forwards
references, but only of relays the introspection primitives report as
direct, so runs satisfy the hypotheses of the stabilization guarantees.
"""

from __future__ import annotations

from typing import Optional

from .core import ActionInvocation, RelayRef
from .kernel import ProcessContext, WorldState


class DeliveryTracker:
    """Harness-side ledger of payload sends and receipts.

    At send time it asks the oracle whether the sending relay was valid and
    freezes the expected receiver; the application itself never sees any of
    this.
    """

    def __init__(self, world: WorldState) -> None:
        self.world = world
        self.sent: dict = {}      # marker -> (expected pid, valid at send)
        self.received: dict = {}  # marker -> pid

    def on_send(self, ctx: ProcessContext, ref: RelayRef) -> Optional[tuple]:
        from . import oracle

        layer = self.world.layers.get(ctx.rid)
        relay = layer.relays.get(ref.relay_id) if layer else None
        if relay is None:
            return None
        marker = (ctx.pid, len(self.sent))
        ok, _ = oracle.valid_relay(self.world, relay.id)
        self.sent[marker] = (relay.sink_rid.value, ok)
        return marker

    def on_receive(self, ctx: ProcessContext, marker: tuple) -> None:
        self.received.setdefault(marker, ctx.pid)

    def undelivered_valid(self) -> list:
        return [
            marker
            for marker, (_, ok) in self.sent.items()
            if ok and marker not in self.received
        ]

    def misdelivered(self) -> list:
        out = []
        for marker, pid in self.received.items():
            expected, ok = self.sent.get(marker, (None, False))
            if ok and pid != expected:
                out.append((marker, pid, expected))
        return out


class RandomDeliberateApp:
    """Seeded random exerciser of the relay primitives.

    send_refs: "never" sends payloads only; "direct" also introduces
    references of direct relays via arbitrary owned relays.
    """

    def __init__(self, send_refs: str = "direct", tracker: Optional[DeliveryTracker] = None,
                 max_relays: int = 8) -> None:
        assert send_refs in ("never", "direct")
        self.send_refs = send_refs
        self.tracker = tracker
        self.max_relays = max_relays
        self.frozen = False  # set by harnesses to stop issuing commands

    def on_tick(self, ctx: ProcessContext) -> None:
        if self.frozen:
            return
        rng = ctx.rng
        refs = ctx.get_relays()
        roll = rng.random()
        if roll < 0.45 and refs:
            ref = refs[rng.randrange(len(refs))]
            marker = self.tracker.on_send(ctx, ref) if self.tracker else None
            ctx.send(ref, "note", (marker,))
        elif roll < 0.55 and len(refs) < self.max_relays:
            ctx.new_relay()
        elif roll < 0.65 and refs:
            ref = refs[rng.randrange(len(refs))]
            if ctx.incoming(ref) == 0:
                ctx.delete_relay(ref)
        elif roll < 0.75 and len(refs) >= 2:
            a = refs[rng.randrange(len(refs))]
            b = refs[rng.randrange(len(refs))]
            if a != b and ctx.same_target(a, b) and not ctx.is_sink(a):
                ctx.merge({a, b})
        elif roll < 0.9 and self.send_refs == "direct" and refs:
            carried = [r for r in refs if ctx.direct(r)]
            if carried:
                s = carried[rng.randrange(len(carried))]
                via = refs[rng.randrange(len(refs))]
                ctx.send(via, "meet", (s,), relay_positions=(0,))

    def on_message(self, ctx: ProcessContext, action: ActionInvocation, via: RelayRef) -> None:
        if action.label == "note" and self.tracker and action.params and action.params[0]:
            self.tracker.on_receive(ctx, tuple(action.params[0]))
        # "meet" deliveries hand over a relay reference; it joins the owned
        # pool automatically and the next ticks will exercise it.


class IdleApp:
    """Issues no commands at all."""

    def on_tick(self, ctx: ProcessContext) -> None:
        pass

    def on_message(self, ctx: ProcessContext, action: ActionInvocation, via: RelayRef) -> None:
        pass
