"""Worker-side protocol state machine.

A worker owns N slots and walks them with a wrapping cursor. A slot is
claimed by sending a PA packet, held through the FA broadcast and the
worker's acknowledgement, and released only by the aggregator's
confirmation broadcast. While held, the slot always has exactly one
armed retransmission timer, and retransmissions are byte-identical
copies of the last packet sent for the slot.

Deviations from the unconditional-forward hardware description, both
needed for correctness under duplication (see decision notes):
  - a duplicate FA is re-acked but delivered upward at most once;
  - a confirmation for a slot still awaiting its FA is ignored (it can
    only be a stale re-broadcast from the slot's previous round).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from .wire import Packet

AWAIT_FA = "awaiting_fa"
AWAIT_CONFIRM = "awaiting_confirm"


class WorkerStateError(RuntimeError):
    """Internal-consistency violation (e.g. a timer fired for a freed slot)."""


class TimerService(Protocol):
    def arm(self, slot: int) -> object: ...
    def cancel(self, handle: object) -> None: ...


@dataclass
class _Inflight:
    packet: Packet
    phase: str
    timer: object


@dataclass
class RxEvents:
    """What a received packet caused: at most one of each."""

    fa: tuple[int, tuple[int, ...]] | None = None  # (slot, payload) delivered upward
    send: Packet | None = None                     # ack to transmit
    freed: int | None = None                       # slot released by confirmation
    ignored: bool = False                          # stale packet, no inflight entry
    duplicate_fa: bool = False
    stale_confirm: bool = False


class WorkerProto:
    def __init__(self, n_slots: int, index: int, payload_len: int, timers: TimerService):
        if n_slots < 1 or n_slots > 65536:
            raise ValueError(f"slot count must be in [1, 65536], got {n_slots}")
        if not 0 <= index < 32:
            raise ValueError(f"worker index must be in [0, 32), got {index}")
        self.n_slots = n_slots
        self.index = index
        self.payload_len = payload_len
        self.timers = timers
        self.bm = 1 << index
        self.unused = [True] * n_slots
        self.cursor = 0
        self.inflight: dict[int, _Inflight] = {}

    def send_pa(self, payload) -> Packet | None:
        """Claim the cursor slot and build its PA packet, or None if busy.

        Busy means the cursor slot is still held by an unconfirmed round;
        the caller retries after the next slot release.
        """
        payload = tuple(int(v) for v in payload)
        if len(payload) != self.payload_len:
            raise ValueError(f"payload length {len(payload)} != {self.payload_len}")
        slot = self.cursor
        if not self.unused[slot]:
            return None
        pkt = Packet(is_agg=True, acked=False, seq=slot, bm=self.bm, payload=payload)
        self.unused[slot] = False
        self.cursor = (self.cursor + 1) % self.n_slots
        self.inflight[slot] = _Inflight(pkt, AWAIT_FA, self.timers.arm(slot))
        return pkt

    def receive(self, pkt: Packet) -> RxEvents:
        ent = self.inflight.get(pkt.seq)
        if ent is None:
            return RxEvents(ignored=True)
        if pkt.is_agg:
            if ent.phase == AWAIT_FA:
                self.timers.cancel(ent.timer)
                ack = Packet(
                    is_agg=False,
                    acked=False,
                    seq=pkt.seq,
                    bm=self.bm,
                    payload=pkt.payload,
                )
                ent.packet = ack
                ent.phase = AWAIT_CONFIRM
                ent.timer = self.timers.arm(pkt.seq)
                return RxEvents(fa=(pkt.seq, pkt.payload), send=ack)
            # duplicate FA after we already acked: re-ack, never re-deliver
            self.timers.cancel(ent.timer)
            ent.timer = self.timers.arm(pkt.seq)
            return RxEvents(send=ent.packet, duplicate_fa=True)
        if ent.phase == AWAIT_FA:
            # confirmation can't belong to a round we never acked; this is
            # a stale re-broadcast from the slot's previous occupancy
            return RxEvents(stale_confirm=True)
        self.timers.cancel(ent.timer)
        del self.inflight[pkt.seq]
        self.unused[pkt.seq] = True
        return RxEvents(freed=pkt.seq)

    def on_timeout(self, slot: int) -> Packet:
        """Retransmit the slot's last packet, byte-identical; re-arms the timer."""
        ent = self.inflight.get(slot)
        if ent is None:
            raise WorkerStateError(f"timer fired for freed slot {slot}")
        ent.timer = self.timers.arm(slot)
        return ent.packet

    def outstanding(self) -> list[tuple[int, str]]:
        return [(slot, ent.phase) for slot, ent in sorted(self.inflight.items())]
