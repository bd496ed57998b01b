"""Deterministic discrete-event simulator for the aggregation protocol.

One switch, W workers, star links. Virtual time is integer nanoseconds;
every random choice comes from a single seeded `random.Random`, and heap
ties break by insertion order, so a (topology, faults, workload) triple
replays to a byte-identical trace.

Fault draws happen per link traversal in a fixed order: drop first, then
the jitter draw for the delivery, then an independent duplication draw
(duplicates get an extra jitter draw on top of the original's arrival,
so a copy never arrives before the packet it copies).

The "endhost" topology models running the same aggregation logic on a
server host behind the switch: each logical hop crosses the switch twice
and pays host processing instead of switch processing. It reuses the
same state machines, only the delays change.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import math
import random
from dataclasses import dataclass

from .switch_agg import SwitchState
from .wire import Packet, decode_packet, encode_packet, wrap32
from .worker_proto import WorkerProto

_DELIVER_AGG = 0
_DELIVER_WORKER = 1
_TIMER = 2
_CALL = 3


@dataclass(frozen=True)
class FaultModel:
    """Per-link-traversal fault behaviour, all times in virtual ns."""

    drop_prob: float = 0.0
    dup_prob: float = 0.0
    latency_ns: int = 500
    jitter_ns: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob out of [0,1]: {self.drop_prob}")
        if not 0.0 <= self.dup_prob <= 1.0:
            raise ValueError(f"dup_prob out of [0,1]: {self.dup_prob}")
        if self.drop_prob + self.dup_prob > 1.0:
            raise ValueError("drop_prob + dup_prob must not exceed 1")
        if self.latency_ns < 0 or self.jitter_ns < 0:
            raise ValueError("latency and jitter must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True)
class StarTopology:
    """Workers directly attached to the aggregating switch."""

    n_workers: int
    n_slots: int
    payload_len: int
    proc_ns: int = 100
    ser_ns: int = 0  # per-packet serialization on each worker uplink port
    down_ser_ns: int = 0  # switch egress serialization (cut-through by default)

    def hop_ns(self, latency_ns: int) -> tuple[int, int, int]:
        """(uplink, processing, downlink) delays for one logical hop."""
        return latency_ns, self.proc_ns, latency_ns


@dataclass(frozen=True)
class EndhostTopology:
    """Aggregation on a server host reached through the switch.

    Each direction crosses worker-switch and switch-host links plus the
    switch's forwarding delay; aggregation pays host processing time.
    """

    n_workers: int
    n_slots: int
    payload_len: int
    proc_ns: int = 100  # switch forwarding, paid twice per direction
    host_proc_ns: int = 2000
    ser_ns: int = 0
    down_ser_ns: int = 0

    def hop_ns(self, latency_ns: int) -> tuple[int, int, int]:
        one_way = latency_ns + self.proc_ns + latency_ns
        return one_way, self.host_proc_ns, one_way


class LivenessFailure(RuntimeError):
    """Simulation ended with unfinished rounds; names the stuck slots."""

    def __init__(self, stuck, trace):
        self.stuck = stuck
        self.trace = trace
        names = ", ".join(f"w{w}/slot{s}:{ph}" for w, s, ph in stuck) or "none armed"
        super().__init__(f"liveness failure, stuck: {names}")


class GroundTruthViolation(RuntimeError):
    """A broadcast sum disagreed with the wrap-sum of its contributions."""


@dataclass
class Trace:
    events: list | None  # (time_ns, kind, node, slot, detail) or None in counters mode
    counters: dict
    round_latencies_ns: list
    incomplete_rounds: int
    completed: bool

    def write_csv(self, fileobj) -> None:
        w = csv.writer(fileobj)
        w.writerow(["time_ns", "event_kind", "node", "slot", "detail"])
        for row in self.events or ():
            w.writerow(row)


def measure_allreduce_latency(trace: Trace) -> dict:
    """Per-round latency stats; a round spans first PA send to last FA receipt."""
    lats = sorted(trace.round_latencies_ns)
    if not lats:
        return {"count": 0, "incomplete": trace.incomplete_rounds}
    n = len(lats)

    def pct(q):  # nearest-rank percentile on integer ns
        return lats[min(n - 1, max(0, math.ceil(q * n) - 1))]

    return {
        "count": n,
        "incomplete": trace.incomplete_rounds,
        "min": lats[0],
        "max": lats[-1],
        "p50": pct(0.50),
        "p99": pct(0.99),
        "mean": sum(lats) / n,
    }


def fuzz_payload(worker: int, slot: int, occupancy: int, length: int) -> tuple:
    """Deterministic pseudo-random int32 payload, distinct per round role."""
    digest = hashlib.blake2b(
        f"{worker}:{slot}:{occupancy}".encode(), digest_size=4 * length
    ).digest()
    return tuple(
        int.from_bytes(digest[4 * i : 4 * i + 4], "little", signed=True)
        for i in range(length)
    )


class PumpWorkload:
    """Every worker keeps all its slots busy until it has sent `rounds` PAs."""

    def __init__(self, rounds: int, payload_fn=fuzz_payload):
        if rounds < 1:
            raise ValueError("rounds must be positive")
        self.rounds = rounds
        self.payload_fn = payload_fn
        self._sent = None

    def start(self, sim):
        self._sent = [0] * sim.n_workers
        self._occ = [[0] * sim.n_slots for _ in range(sim.n_workers)]
        for w in range(sim.n_workers):
            self.pump(sim, w)

    def pump(self, sim, w):
        while self._sent[w] < self.rounds:
            slot = sim.workers[w].cursor
            payload = self.payload_fn(w, slot, self._occ[w][slot], sim.payload_len)
            if sim.worker_send(w, payload) is None:
                return
            self._sent[w] += 1
            self._occ[w][slot] += 1

    def on_fa(self, sim, worker, slot, payload):
        pass

    def on_slot_free(self, sim, worker, slot):
        self.pump(sim, worker)

    def done(self, sim) -> bool:
        return all(s == self.rounds for s in self._sent)


class Simulator:
    """Event loop binding worker and switch state machines to lossy links."""

    def __init__(
        self,
        topology,
        fault: FaultModel,
        workload,
        *,
        timeout_ns: int | None = None,
        horizon_ns: int | None = None,
        collect_events: bool = True,
        wire_check: bool = False,
        check_sums: bool = True,
        switch_mutate: str | None = None,
    ):
        self.topology = topology
        self.fault = fault
        self.workload = workload
        self.n_workers = topology.n_workers
        self.n_slots = topology.n_slots
        self.payload_len = topology.payload_len
        self.up_ns, self.proc_ns, self.down_ns = topology.hop_ns(fault.latency_ns)
        self.ser_ns = topology.ser_ns
        self.down_ser_ns = topology.down_ser_ns
        if timeout_ns is None:
            # comfortably above a full round trip even with maximal jitter
            # and a full window of packets backlogged on the port queues
            backlog = topology.n_slots * (self.ser_ns + self.down_ser_ns)
            timeout_ns = 4 * (
                self.up_ns + self.proc_ns + self.down_ns + fault.jitter_ns + backlog
            )
        self.timeout_ns = timeout_ns
        self.horizon_ns = horizon_ns
        self.wire_check = wire_check
        self.check_sums = check_sums
        self.rng = random.Random(fault.seed)
        self.now = 0
        self._heap = []
        self._seq = 0
        self.switch = SwitchState(
            self.n_slots, self.n_workers, self.payload_len, mutate=switch_mutate
        )
        self._timers = [_SlotTimers(self, w) for w in range(self.n_workers)]
        self.workers = [
            WorkerProto(self.n_slots, w, self.payload_len, self._timers[w])
            for w in range(self.n_workers)
        ]
        # one serialization queue per port, both directions
        self._up_free = [0] * self.n_workers
        self._down_free = [0] * self.n_workers
        self._link_fifo = {}  # directed link -> latest scheduled arrival
        self.events = [] if collect_events else None
        self.counters = {
            "sent": 0,
            "delivered": 0,
            "dropped": 0,
            "duplicated": 0,
            "retransmits": 0,
            "stale_timers": 0,
            "stale_confirms": 0,
            "duplicate_fas": 0,
        }
        # round bookkeeping: key (slot, occupancy)
        self._truth = {} if check_sums else None
        self._occ_sent = [[0] * self.n_slots for _ in range(self.n_workers)]
        self._occ_seen = [[0] * self.n_slots for _ in range(self.n_workers)]
        self._rounds = {}  # key -> [first_send_ns, last_fa_ns, fa_count]
        self.round_latencies = []

    # -- event plumbing ------------------------------------------------

    def _schedule(self, t: int, kind: int, data) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, data))
        self._seq += 1

    def call_later(self, delay_ns: int, fn) -> None:
        """Run fn() at now + delay_ns; for workloads that model compute time."""
        self._schedule(self.now + delay_ns, _CALL, fn)

    def _log(self, kind: str, node: str, slot: int, detail: str = "") -> None:
        if self.events is not None:
            self.events.append((self.now, kind, node, slot, detail))

    # -- transmission with fault draws ----------------------------------

    def _transmit(
        self, pkt: Packet, depart: int, path_ns: int, ev_kind: int, dst, link: str
    ) -> None:
        self.counters["sent"] += 1
        if self.wire_check:
            if decode_packet(encode_packet(pkt), len(pkt.payload)) != pkt:
                raise AssertionError(f"wire round-trip mangled {pkt}")
        if self.fault.drop_prob > 0.0 and self.rng.random() < self.fault.drop_prob:
            self.counters["dropped"] += 1
            self._log("drop", link, pkt.seq, f"bm={pkt.bm:#x}")
            return
        jitter = self.rng.randrange(self.fault.jitter_ns + 1) if self.fault.jitter_ns else 0
        # a directed link is one wire: jitter stretches delays and reorders
        # traffic across links, but can never overtake earlier traffic on the
        # same link (otherwise a late ack could outrun its own retransmitted
        # request and corrupt the next occupant of the slot)
        arrival = max(depart + path_ns + jitter, self._link_fifo.get(link, 0))
        self._link_fifo[link] = arrival
        self.counters["delivered"] += 1
        self._schedule(arrival, ev_kind, (dst, pkt))
        if self.fault.dup_prob > 0.0 and self.rng.random() < self.fault.dup_prob:
            extra = self.rng.randrange(self.fault.jitter_ns + 1) if self.fault.jitter_ns else 0
            self.counters["duplicated"] += 1
            self.counters["delivered"] += 1
            self._link_fifo[link] = arrival + extra
            self._schedule(arrival + extra, ev_kind, (dst, pkt))

    def _send_up(self, worker: int, pkt: Packet) -> None:
        depart = max(self.now, self._up_free[worker])
        self._up_free[worker] = depart + self.ser_ns
        self._log(
            "send_agg" if pkt.is_agg else "send_ack", f"w{worker}", pkt.seq, f"bm={pkt.bm:#x}"
        )
        self._transmit(pkt, depart + self.ser_ns, self.up_ns, _DELIVER_AGG, None, f"up{worker}")

    def _send_down(self, worker: int, pkt: Packet) -> None:
        # outputs leave only after the aggregation node's processing delay
        depart = max(self.now + self.proc_ns, self._down_free[worker])
        self._down_free[worker] = depart + self.down_ser_ns
        self._log(
            "send_fa" if pkt.is_agg else "send_confirm", "switch", pkt.seq, f"dst=w{worker}"
        )
        self._transmit(
            pkt, depart + self.down_ser_ns, self.down_ns, _DELIVER_WORKER, worker, f"down{worker}"
        )

    # -- worker-side actions --------------------------------------------

    def worker_send(self, worker: int, payload) -> Packet | None:
        """Try to start a round on the worker's cursor slot."""
        pkt = self.workers[worker].send_pa(payload)
        if pkt is None:
            return None
        occ = self._occ_sent[worker][pkt.seq]
        self._occ_sent[worker][pkt.seq] = occ + 1
        key = (pkt.seq, occ)
        if self._truth is not None:
            acc = self._truth.get(key)
            if acc is None:
                self._truth[key] = list(pkt.payload)
            else:
                for i, v in enumerate(pkt.payload):
                    acc[i] = wrap32(acc[i] + v)
        rec = self._rounds.get(key)
        if rec is None:
            self._rounds[key] = [self.now, -1, 0]
        else:
            rec[0] = min(rec[0], self.now)
        self._send_up(worker, pkt)
        return pkt

    def _on_fa_up(self, worker: int, slot: int, payload: tuple) -> None:
        occ = self._occ_seen[worker][slot]
        self._occ_seen[worker][slot] = occ + 1
        key = (slot, occ)
        if self._truth is not None:
            expect = self._truth.get(key)
            if expect is None or tuple(expect) != payload:
                raise GroundTruthViolation(
                    f"slot {slot} round {occ} at w{worker}: got {payload}, "
                    f"want {tuple(expect) if expect else 'nothing'}"
                )
        rec = self._rounds[key]
        rec[1] = max(rec[1], self.now)
        rec[2] += 1
        if rec[2] == self.n_workers:
            self.round_latencies.append(rec[1] - rec[0])
            del self._rounds[key]
            if self._truth is not None:
                del self._truth[key]
        self._log("fa_up", f"w{worker}", slot, "")
        self.workload.on_fa(self, worker, slot, payload)

    # -- dispatch --------------------------------------------------------

    def _dispatch(self, kind: int, data) -> None:
        if kind == _DELIVER_AGG:
            _, pkt = data
            self._log("deliver", "switch", pkt.seq, f"bm={pkt.bm:#x}")
            for w, out in self.switch.receive(pkt):
                self._send_down(w, out)
        elif kind == _DELIVER_WORKER:
            w, pkt = data
            self._log("deliver", f"w{w}", pkt.seq, "fa" if pkt.is_agg else "confirm")
            ev = self.workers[w].receive(pkt)
            if ev.duplicate_fa:
                self.counters["duplicate_fas"] += 1
            if ev.stale_confirm:
                self.counters["stale_confirms"] += 1
            if ev.fa is not None:
                self._on_fa_up(w, ev.fa[0], ev.fa[1])
            if ev.send is not None:
                self._send_up(w, ev.send)
            if ev.freed is not None:
                self._log("slot_free", f"w{w}", ev.freed, "")
                self.workload.on_slot_free(self, w, ev.freed)
        elif kind == _TIMER:
            w, slot, gen = data
            timers = self._timers[w]
            if timers.live[slot] != gen:
                self.counters["stale_timers"] += 1
                return
            timers.live[slot] = None
            pkt = self.workers[w].on_timeout(slot)
            self.counters["retransmits"] += 1
            self._log("timeout", f"w{w}", slot, "fa" if pkt.is_agg else "ack")
            self._send_up(w, pkt)
        else:
            data()

    def _stuck(self) -> list:
        return [
            (w, slot, phase)
            for w in range(self.n_workers)
            for slot, phase in self.workers[w].outstanding()
        ]

    def _trace(self, completed: bool) -> Trace:
        return Trace(
            events=self.events,
            counters=dict(self.counters),
            round_latencies_ns=list(self.round_latencies),
            incomplete_rounds=len(self._rounds),
            completed=completed,
        )

    def run(self) -> Trace:
        self.workload.start(self)
        heap = self._heap
        while heap:
            t, _, kind, data = heapq.heappop(heap)
            if self.horizon_ns is not None and t > self.horizon_ns:
                raise LivenessFailure(self._stuck(), self._trace(False))
            self.now = t
            self._dispatch(kind, data)
        stuck = self._stuck()
        if stuck or not self.workload.done(self):
            raise LivenessFailure(stuck, self._trace(False))
        return self._trace(True)


class _SlotTimers:
    """Retransmission timers for one worker; cancellation is lazy."""

    def __init__(self, sim: Simulator, worker: int):
        self.sim = sim
        self.worker = worker
        self.live: dict[int, int | None] = {}
        self._gen = 0

    def arm(self, slot: int):
        self._gen += 1
        self.live[slot] = self._gen
        self.sim._schedule(
            self.sim.now + self.sim.timeout_ns, _TIMER, (self.worker, slot, self._gen)
        )
        return (slot, self._gen)

    def cancel(self, handle) -> None:
        slot, gen = handle
        if self.live.get(slot) == gen:
            self.live[slot] = None


def run(topology, fault: FaultModel, workload, **kwargs) -> Trace:
    """Build a Simulator, drive it to quiescence, return its Trace."""
    return Simulator(topology, fault, workload, **kwargs).run()
