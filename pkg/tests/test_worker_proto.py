import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchsgd.wire import Packet
from switchsgd.worker_proto import (
    AWAIT_CONFIRM,
    AWAIT_FA,
    WorkerProto,
    WorkerStateError,
)


class FakeTimers:
    """Records arm/cancel calls; handles are unique ints."""

    def __init__(self):
        self._ids = itertools.count()
        self.armed = {}  # handle -> slot

    def arm(self, slot):
        h = next(self._ids)
        self.armed[h] = slot
        return h

    def cancel(self, handle):
        del self.armed[handle]

    def fire(self, worker, slot):
        """Consume the slot's armed timer and deliver the timeout."""
        handle = next(h for h, s in self.armed.items() if s == slot)
        del self.armed[handle]
        return worker.on_timeout(slot)

    def slots(self):
        return sorted(self.armed.values())


def fa(seq, payload):
    return Packet(is_agg=True, acked=False, seq=seq, bm=1, payload=tuple(payload))


def confirm(seq, payload):
    return Packet(is_agg=False, acked=True, seq=seq, bm=1, payload=tuple(payload))


def make(n_slots=4, index=0, payload_len=1):
    t = FakeTimers()
    return WorkerProto(n_slots, index, payload_len, t), t


def test_first_send_claims_slot_zero():
    w, t = make()
    pkt = w.send_pa([1])
    assert pkt == Packet(True, False, 0, 1, (1,))
    assert w.cursor == 1 and not w.unused[0]
    assert t.slots() == [0]


def test_bitmap_encodes_worker_index():
    w, _ = make(index=5)
    assert w.send_pa([9]).bm == 1 << 5


def test_busy_after_n_sends():
    w, t = make(n_slots=4)
    for i in range(4):
        assert w.send_pa([i]).seq == i
    assert w.send_pa([99]) is None
    assert t.slots() == [0, 1, 2, 3]
    assert w.outstanding() == [(i, AWAIT_FA) for i in range(4)]


def test_wraparound_after_slot_release():
    w, _ = make(n_slots=2)
    w.send_pa([0])
    w.send_pa([1])
    w.receive(fa(0, [10]))
    w.receive(confirm(0, [10]))
    pkt = w.send_pa([2])
    assert pkt.seq == 0  # cursor wrapped back to the freed slot


def test_release_out_of_cursor_order_still_blocks():
    # slot 1 freed but cursor points at still-busy slot 0: send stays busy
    w, _ = make(n_slots=2)
    w.send_pa([0])
    w.send_pa([1])
    w.receive(fa(1, [5]))
    w.receive(confirm(1, [5]))
    assert w.send_pa([9]) is None


def test_fa_delivers_acks_and_rearms():
    w, t = make()
    w.send_pa([7])
    ev = w.receive(fa(0, [70]))
    assert ev.fa == (0, (70,))
    assert ev.send == Packet(False, False, 0, 1, (70,))  # ack echoes the sum
    assert not ev.duplicate_fa
    assert w.outstanding() == [(0, AWAIT_CONFIRM)]
    assert t.slots() == [0]  # old timer cancelled, ack timer armed


def test_duplicate_fa_reacks_without_redelivery():
    w, t = make()
    w.send_pa([7])
    first = w.receive(fa(0, [70]))
    second = w.receive(fa(0, [70]))
    assert second.fa is None and second.duplicate_fa
    assert second.send == first.send  # byte-identical re-ack
    assert t.slots() == [0]


def test_confirm_frees_slot():
    w, t = make()
    w.send_pa([7])
    w.receive(fa(0, [70]))
    ev = w.receive(confirm(0, [70]))
    assert ev.freed == 0 and w.unused[0]
    assert t.slots() == []
    assert w.outstanding() == []


def test_stale_confirm_in_await_fa_is_ignored():
    # a re-broadcast confirmation from the slot's previous round must not
    # free a slot whose current round hasn't even seen its FA yet
    w, t = make(n_slots=1)
    w.send_pa([1])
    w.receive(fa(0, [1]))
    w.receive(confirm(0, [1]))
    w.send_pa([2])  # slot 0 reused
    ev = w.receive(confirm(0, [1]))  # duplicate of the previous confirm
    assert ev.stale_confirm and ev.freed is None
    assert not w.unused[0]
    assert w.outstanding() == [(0, AWAIT_FA)]
    assert t.slots() == [0]


def test_confirm_for_idle_slot_ignored():
    w, _ = make()
    ev = w.receive(confirm(2, [0]))
    assert ev.ignored and ev.freed is None


def test_fa_for_idle_slot_ignored():
    w, t = make()
    ev = w.receive(fa(3, [1]))
    assert ev.ignored and ev.fa is None and ev.send is None
    assert t.slots() == []


def test_timeout_retransmits_byte_identical():
    w, t = make()
    sent = w.send_pa([42])
    assert t.fire(w, 0) == sent
    assert t.fire(w, 0) == sent
    assert t.slots() == [0]  # each retransmission re-armed exactly one timer
    # after the FA, timeouts retransmit the ack instead
    ev = w.receive(fa(0, [420]))
    assert t.fire(w, 0) == ev.send


def test_timeout_on_freed_slot_raises():
    w, _ = make()
    w.send_pa([1])
    w.receive(fa(0, [1]))
    w.receive(confirm(0, [1]))
    with pytest.raises(WorkerStateError):
        w.on_timeout(0)


def test_payload_length_enforced():
    w, _ = make(payload_len=2)
    with pytest.raises(ValueError):
        w.send_pa([1])


def test_constructor_validation():
    t = FakeTimers()
    with pytest.raises(ValueError):
        WorkerProto(0, 0, 1, t)
    with pytest.raises(ValueError):
        WorkerProto(4, 32, 1, t)
    with pytest.raises(ValueError):
        WorkerProto(4, -1, 1, t)


@given(st.lists(st.sampled_from(["send", "fa", "confirm", "timeout"]), max_size=60))
@settings(max_examples=80, deadline=None)
def test_slot_bookkeeping_invariants(ops):
    w, t = make(n_slots=3)
    vals = itertools.count(1)
    for op in ops:
        busy = [s for s in range(3) if not w.unused[s]]
        if op == "send":
            w.send_pa([next(vals)])
        elif op == "fa" and busy:
            w.receive(fa(busy[0], [next(vals)]))
        elif op == "confirm" and busy:
            w.receive(confirm(busy[0], [0]))
        elif op == "timeout" and busy:
            t.fire(w, busy[0])
        # inflight entries and unused[] always agree, one timer per slot
        assert sorted(w.inflight) == [s for s in range(3) if not w.unused[s]]
        assert t.slots() == sorted(w.inflight)
