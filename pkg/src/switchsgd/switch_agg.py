"""Aggregator state machine: exactly-once sum-and-broadcast per slot.

Each of N slots holds a running payload sum plus bitmap/count pairs for
the aggregation round and the acknowledgement round. Duplicate packets
are detected by bitmap and never re-added; a retransmission arriving
after a round completed re-triggers the corresponding broadcast instead.
Slot registers are cleared only once every worker has acknowledged the
broadcast sum, which is what makes slot reuse safe.

The state machine is a pure function of (state, packet): no clocks, no
randomness. Transport concerns (loss, delay, duplication) live in the
simulator.
"""

from __future__ import annotations

import numpy as np

from .wire import Packet

MAX_WORKERS = 32  # bitmap width


class ProtocolViolation(ValueError):
    """An inbound packet that a conforming worker could never have sent."""


class SwitchState:
    """Aggregation registers for N slots and W workers.

    With lenient=True, violating packets are silently dropped (the
    counter `dropped_invalid` still ticks) instead of raising.

    `mutate` disables one protective check for checker self-tests:
    "skip_dup_check" re-adds duplicate contributions. Test-only.
    """

    def __init__(
        self,
        n_slots: int,
        n_workers: int,
        payload_len: int,
        *,
        lenient: bool = False,
        mutate: str | None = None,
    ):
        if not 1 <= n_workers <= MAX_WORKERS:
            raise ValueError(
                f"worker count must be in [1, {MAX_WORKERS}], got {n_workers}"
            )
        if not 1 <= n_slots <= 65536:
            raise ValueError(f"slot count must be in [1, 65536], got {n_slots}")
        if payload_len < 1:
            raise ValueError("payload length must be positive")
        if mutate not in (None, "skip_dup_check"):
            raise ValueError(f"unknown mutation {mutate!r}")
        self.n_slots = n_slots
        self.n_workers = n_workers
        self.payload_len = payload_len
        self.lenient = lenient
        self.mutate = mutate
        self.agg_sum = np.zeros((n_slots, payload_len), dtype=np.int32)
        self.agg_count = np.zeros(n_slots, dtype=np.int64)
        self.agg_bitmap = np.zeros(n_slots, dtype=np.int64)
        self.ack_count = np.zeros(n_slots, dtype=np.int64)
        self.ack_bitmap = np.zeros(n_slots, dtype=np.int64)
        self.dropped_invalid = 0

    def _reject(self, why: str) -> list:
        if self.lenient:
            self.dropped_invalid += 1
            return []
        raise ProtocolViolation(why)

    def receive(self, pkt: Packet) -> list[tuple[int, Packet]]:
        """Process one packet; returns (worker_index, packet) sends."""
        if not 0 <= pkt.seq < self.n_slots:
            return self._reject(f"slot {pkt.seq} out of range")
        if pkt.bm.bit_count() != 1:
            return self._reject(f"bitmap {pkt.bm:#x} must have exactly one bit")
        src = pkt.bm.bit_length() - 1
        if src >= self.n_workers:
            return self._reject(f"bitmap names worker {src} >= {self.n_workers}")
        if len(pkt.payload) != self.payload_len:
            return self._reject(
                f"payload length {len(pkt.payload)} != {self.payload_len}"
            )
        seq = pkt.seq
        if pkt.is_agg:
            fresh = not (int(self.agg_bitmap[seq]) & pkt.bm)
            if fresh or self.mutate == "skip_dup_check":
                if fresh:
                    self.agg_count[seq] += 1
                    self.agg_bitmap[seq] |= pkt.bm
                with np.errstate(over="ignore"):
                    self.agg_sum[seq] += np.asarray(pkt.payload, dtype=np.int32)
                if self.agg_count[seq] == self.n_workers and fresh:
                    # aggregation round complete: open a fresh ack round
                    self.ack_count[seq] = 0
                    self.ack_bitmap[seq] = 0
            if self.agg_count[seq] == self.n_workers:
                out = Packet(
                    is_agg=True,
                    acked=False,
                    seq=seq,
                    bm=pkt.bm,
                    payload=tuple(int(v) for v in self.agg_sum[seq]),
                )
                return [(w, out) for w in range(self.n_workers)]
            return []
        # acknowledgement round
        if not (int(self.ack_bitmap[seq]) & pkt.bm):
            self.ack_count[seq] += 1
            self.ack_bitmap[seq] |= pkt.bm
            if self.ack_count[seq] == self.n_workers:
                # every worker saw the sum: release the slot for reuse
                self.agg_count[seq] = 0
                self.agg_bitmap[seq] = 0
                self.agg_sum[seq] = 0
        if self.ack_count[seq] == self.n_workers:
            out = Packet(
                is_agg=False, acked=True, seq=seq, bm=pkt.bm, payload=pkt.payload
            )
            return [(w, out) for w in range(self.n_workers)]
        return []
