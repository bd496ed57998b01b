"""Distributed SGD orchestration over the simulated aggregation fabric.

Model-parallel mode gives each worker a contiguous feature span (split
further across its engines). Per micro-batch every worker computes the
partial activations for its span, AllReduces them through the switch,
turns the summed activations into loss-derivative scales, and folds the
micro-batch's gradient into its span. The model update waits for the
whole mini-batch; the next mini-batch's forward waits for the update.
Because every arithmetic step is a wrapping int32 add, the final model
is bit-identical to the sequential reference no matter how the work is
partitioned or how packets were delayed, dropped, or duplicated.

Data-parallel mode gives each worker a block of each mini-batch's rows
and a full model replica; the D-length gradient is AllReduced through
the same protocol in micro-batch-sized chunks over a sliding window of
slots. Replicas stay bit-identical because every worker applies the
same summed gradient.

The timing knobs deliberately separate per-micro-batch forward/backward
durations from the numeric layer, which runs instantaneously at event
boundaries; the defaults derive from the engine cost model at 250 MHz.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .glm import (
    _shift_for_minibatch,
    backward_batch,
    batch_scales,
    forward_batch,
    loss_eval,
    model_update,
)
from .ingest import Dataset, plan_partitions
from .netsim import FaultModel, Simulator, StarTopology
from .wire import fx_from_real, packet_size


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TimingParams:
    """Virtual durations of the compute stages, all integer ns."""

    forward_ns: int | None = None  # one micro-batch forward on one worker
    backward_ns: int | None = None  # one micro-batch backward on one worker
    compute_ns: int | None = None  # data-parallel whole-batch local compute
    ser_ns: int = 0  # uplink wire time per packet
    proc_ns: int = 100  # aggregation processing


@dataclass(frozen=True)
class TrainingConfig:
    n_workers: int = 1
    n_engines: int = 1
    banks: int = 8
    minibatch: int = 64
    microbatch: int = 8
    precision: int = 4
    learning_rate: float = 0.5
    epochs: int = 1
    loss_kind: str = "squared"
    n_slots: int = 16
    pipeline: bool = True
    fault: FaultModel = field(default_factory=FaultModel)
    timing: TimingParams = field(default_factory=TimingParams)

    def __post_init__(self):
        _shift_for_minibatch(self.minibatch)
        if self.microbatch < 1 or self.minibatch % self.microbatch:
            raise ConfigError(
                f"micro-batch {self.microbatch} must divide mini-batch {self.minibatch}"
            )
        if not 1 <= self.precision <= 8:
            raise ConfigError(f"precision must be in [1,8], got {self.precision}")
        if self.loss_kind not in ("squared", "logistic"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if min(self.n_workers, self.n_engines, self.n_slots, self.banks) < 1:
            raise ConfigError("worker, engine, bank, and slot counts must be positive")
        if self.epochs < 1:
            raise ConfigError("need at least one epoch")

    @property
    def micros_per_batch(self) -> int:
        return self.minibatch // self.microbatch


@dataclass
class TrainMetrics:
    initial_loss: float
    epoch_rows: list  # dict per epoch
    counters: dict
    packet_bytes: int
    iterations: int
    iteration_ends_ns: list

    CSV_FIELDS = (
        "epoch",
        "loss",
        "virtual_time_ns",
        "pkts",
        "bytes",
        "retx",
        "allreduce_p50_ns",
        "allreduce_p99_ns",
    )

    @property
    def losses(self) -> list:
        """Loss curve: entry 0 before training, entry e after epoch e."""
        return [self.initial_loss] + [r["loss"] for r in self.epoch_rows]

    @property
    def total_bytes(self) -> int:
        return self.counters["sent"] * self.packet_bytes

    @property
    def bytes_per_iteration(self) -> float:
        return self.total_bytes / self.iterations

    @property
    def iteration_gaps_ns(self) -> list:
        ends = [0] + self.iteration_ends_ns
        return [b - a for a, b in zip(ends, ends[1:])]

    def write_csv(self, fileobj) -> None:
        w = csv.DictWriter(fileobj, fieldnames=self.CSV_FIELDS)
        w.writeheader()
        for row in self.epoch_rows:
            w.writerow({k: row[k] for k in self.CSV_FIELDS})


def _pct(sorted_vals, q):
    if not sorted_vals:
        return 0
    n = len(sorted_vals)
    return sorted_vals[min(n - 1, max(0, math.ceil(q * n) - 1))]


def _derived_timing(cfg: TrainingConfig, span_width: int, dim: int) -> TimingParams:
    """Fill unset stage durations from the engine cost model at 250 MHz."""
    t = cfg.timing
    groups = max(1, cfg.microbatch // cfg.banks)
    cycles = groups * math.ceil(span_width / (64 * cfg.n_engines)) * cfg.precision
    stage = cycles * 4  # ns
    rows = max(1, cfg.minibatch // cfg.n_workers)
    dp_cycles = 2 * max(1, rows // cfg.banks) * math.ceil(dim / 64) * cfg.precision
    return replace(
        t,
        forward_ns=stage if t.forward_ns is None else t.forward_ns,
        backward_ns=stage if t.backward_ns is None else t.backward_ns,
        compute_ns=dp_cycles * 4 if t.compute_ns is None else t.compute_ns,
    )


class _EpochLedger:
    """Shared per-epoch bookkeeping: loss rows, counters deltas, latencies."""

    def __init__(self, cfg, batches_per_epoch, n_parties, loss_fn):
        self.cfg = cfg
        self.batches_per_epoch = batches_per_epoch
        self.n_parties = n_parties
        self.loss_fn = loss_fn
        self.rows = []
        self.finished = {}
        self.iteration_ends = []
        self.update_times = {}  # batch -> [per-party times]
        self._last_counters = None
        self._lat_mark = 0

    def note_update(self, sim, party, batch):
        times = self.update_times.setdefault(batch, [])
        times.append(sim.now)
        if len(times) == self.n_parties:
            self.iteration_ends.append(max(times))
            del self.update_times[batch]
        batches_done = batch + 1
        if batches_done % self.batches_per_epoch:
            return
        epoch = batches_done // self.batches_per_epoch
        done = self.finished.get(epoch, 0) + 1
        self.finished[epoch] = done
        if done != self.n_parties:
            return
        snap = dict(sim.counters)
        prev = self._last_counters or {k: 0 for k in snap}
        lats = sorted(sim.round_latencies[self._lat_mark :])
        self._lat_mark = len(sim.round_latencies)
        self._last_counters = snap
        self.rows.append(
            {
                "epoch": epoch,
                "loss": self.loss_fn(),
                "virtual_time_ns": sim.now,
                "pkts": snap["sent"] - prev["sent"],
                "bytes": (snap["sent"] - prev["sent"])
                * packet_size(self.cfg.microbatch),
                "retx": snap["retransmits"] - prev["retransmits"],
                "allreduce_p50_ns": _pct(lats, 0.50),
                "allreduce_p99_ns": _pct(lats, 0.99),
            }
        )


class _MPWorkerState:
    def __init__(self, span, x, width):
        self.span = span  # (start, stop) in padded feature space
        self.x = x  # int32 weights for the span
        self.grad = np.zeros(width, dtype=np.int32)
        self.pending = deque()  # payloads ready for free slots, round order
        self.slot_ctx = {}  # slot -> (batch, micro)
        self.batch = 0
        self.micros_forwarded = 0
        self.fas_received = 0
        self.backwards_done = 0
        self.backward_busy = False
        self.backward_queue = deque()
        self.forward_starts = []


class MPWorkload:
    """Micro-batch pipelined (or vanilla serialized) model-parallel SGD."""

    def __init__(self, dataset: Dataset, cfg: TrainingConfig, timing: TimingParams):
        self.ds = dataset
        self.cfg = cfg
        self.timing = timing
        self.gamma = fx_from_real(cfg.learning_rate)
        self.K = cfg.micros_per_batch
        self.batches_per_epoch = dataset.n_samples // cfg.minibatch
        self.total_batches = self.batches_per_epoch * cfg.epochs
        plan = plan_partitions(
            dataset.padded_features, dataset.n_samples, cfg.n_workers, cfg.n_engines, "model"
        )
        spans = plan.spans
        self.worker_spans = [
            (spans[m * cfg.n_engines][0], spans[(m + 1) * cfg.n_engines - 1][1])
            for m in range(cfg.n_workers)
        ]
        self.state = [
            _MPWorkerState(span, np.zeros(span[1] - span[0], np.int32), span[1] - span[0])
            for span in self.worker_spans
        ]
        self.ledger = _EpochLedger(
            cfg, self.batches_per_epoch, cfg.n_workers, self._current_loss
        )

    # the woven bits cache is shared; per-worker math touches only its span
    def assemble_model(self) -> np.ndarray:
        return np.concatenate([st.x for st in self.state])

    def _current_loss(self) -> float:
        return loss_eval(
            self.assemble_model(), self.ds.woven, self.ds.labels, self.cfg.loss_kind
        )

    def _rows(self, batch, micro):
        r0 = (batch % self.batches_per_epoch) * self.cfg.minibatch
        return r0 + micro * self.cfg.microbatch

    def start(self, sim):
        for m in range(self.cfg.n_workers):
            self._begin_forward(sim, m)

    def _begin_forward(self, sim, m):
        st = self.state[m]
        st.forward_starts.append(sim.now)
        sim.call_later(
            self.timing.forward_ns,
            lambda m=m, batch=st.batch: self._forward_done(sim, m, batch, 0),
        )

    def _forward_done(self, sim, m, batch, micro):
        st = self.state[m]
        row0 = self._rows(batch, micro)
        pa = forward_batch(
            self.ds.woven, row0, self.cfg.microbatch, st.span[0], st.x, self.cfg.precision
        )
        st.pending.append((batch, micro, tuple(int(v) for v in pa)))
        st.micros_forwarded += 1
        if self.cfg.pipeline or st.micros_forwarded == self.K:
            self._pump(sim, m)
        if micro + 1 < self.K:
            sim.call_later(
                self.timing.forward_ns,
                lambda: self._forward_done(sim, m, batch, micro + 1),
            )

    def _pump(self, sim, m):
        st = self.state[m]
        if not self.cfg.pipeline and st.micros_forwarded < self.K:
            return  # vanilla mode holds the wire until the whole batch is forwarded
        while st.pending:
            batch, micro, payload = st.pending[0]
            pkt = sim.worker_send(m, payload)
            if pkt is None:
                return
            st.slot_ctx[pkt.seq] = (batch, micro)
            st.pending.popleft()

    def on_fa(self, sim, m, slot, payload):
        st = self.state[m]
        batch, micro = st.slot_ctx[slot]
        row0 = self._rows(batch, micro)
        acts = np.asarray(payload, dtype=np.int32)
        labels = self.ds.labels[row0 : row0 + self.cfg.microbatch]
        scales = batch_scales(self.cfg.loss_kind, self.gamma, acts, labels)
        st.grad += backward_batch(
            self.ds.woven,
            row0,
            self.cfg.microbatch,
            st.span[0],
            st.span[1] - st.span[0],
            scales,
            self.cfg.precision,
        )
        st.fas_received += 1
        if self.cfg.pipeline:
            st.backward_queue.append(batch)
            self._maybe_backward(sim, m)
        elif st.fas_received == self.K:
            # vanilla: the whole backward stage runs once everything arrived
            sim.call_later(
                self.K * self.timing.backward_ns, lambda: self._apply_update(sim, m)
            )

    def _maybe_backward(self, sim, m):
        st = self.state[m]
        if st.backward_busy or not st.backward_queue:
            return
        st.backward_busy = True
        st.backward_queue.popleft()
        sim.call_later(self.timing.backward_ns, lambda: self._backward_done(sim, m))

    def _backward_done(self, sim, m):
        st = self.state[m]
        st.backward_busy = False
        st.backwards_done += 1
        if st.backwards_done == self.K:
            self._apply_update(sim, m)
        else:
            self._maybe_backward(sim, m)

    def _apply_update(self, sim, m):
        st = self.state[m]
        model_update(st.x, st.grad, self.cfg.minibatch)
        st.grad.fill(0)
        batch = st.batch
        st.batch += 1
        st.micros_forwarded = 0
        st.fas_received = 0
        st.backwards_done = 0
        st.backward_queue.clear()
        self.ledger.note_update(sim, m, batch)
        if st.batch < self.total_batches:
            self._begin_forward(sim, m)

    def on_slot_free(self, sim, m, slot):
        self.state[m].slot_ctx.pop(slot, None)
        self._pump(sim, m)

    def done(self, sim) -> bool:
        return all(st.batch == self.total_batches and not st.pending for st in self.state)


class _DPWorkerState:
    def __init__(self, dim, rows):
        self.x = np.zeros(dim, dtype=np.int32)
        self.rows = rows  # (start, stop) offsets inside each mini-batch
        self.gsum = np.zeros(dim, dtype=np.int32)
        self.pending = deque()
        self.slot_ctx = {}
        self.batch = 0
        self.chunks_received = 0


class DPWorkload:
    """Data-parallel SGD: local full-width compute, chunked gradient AllReduce."""

    def __init__(self, dataset: Dataset, cfg: TrainingConfig, timing: TimingParams):
        if cfg.n_workers & (cfg.n_workers - 1):
            raise ConfigError(
                f"data-parallel worker count must be a power of two, got {cfg.n_workers}"
            )
        if cfg.n_workers > cfg.minibatch:
            raise ConfigError("more workers than mini-batch rows")
        self.ds = dataset
        self.cfg = cfg
        self.timing = timing
        self.gamma = fx_from_real(cfg.learning_rate)
        self.dim = dataset.padded_features
        if self.dim % cfg.microbatch:
            raise ConfigError(
                f"micro-batch {cfg.microbatch} must divide padded width {self.dim}"
            )
        self.chunks = self.dim // cfg.microbatch
        self.batches_per_epoch = dataset.n_samples // cfg.minibatch
        self.total_batches = self.batches_per_epoch * cfg.epochs
        plan = plan_partitions(0, cfg.minibatch, cfg.n_workers, 1, "data")
        self.state = [_DPWorkerState(self.dim, span) for span in plan.spans]
        self.ledger = _EpochLedger(cfg, self.batches_per_epoch, cfg.n_workers, self._loss)
        self.replica_digests = []  # per update: tuple of per-worker model hashes

    def _loss(self) -> float:
        return loss_eval(self.state[0].x, self.ds.woven, self.ds.labels, self.cfg.loss_kind)

    def start(self, sim):
        for m in range(self.cfg.n_workers):
            self._begin_compute(sim, m)

    def _begin_compute(self, sim, m):
        sim.call_later(self.timing.compute_ns, lambda: self._compute_done(sim, m))

    def _compute_done(self, sim, m):
        st = self.state[m]
        base = (st.batch % self.batches_per_epoch) * self.cfg.minibatch
        r0, r1 = base + st.rows[0], base + st.rows[1]
        acts = forward_batch(self.ds.woven, r0, r1 - r0, 0, st.x, self.cfg.precision)
        scales = batch_scales(
            self.cfg.loss_kind, self.gamma, acts, self.ds.labels[r0:r1]
        )
        grad = backward_batch(
            self.ds.woven, r0, r1 - r0, 0, self.dim, scales, self.cfg.precision
        )
        mb = self.cfg.microbatch
        for c in range(self.chunks):
            st.pending.append((c, tuple(int(v) for v in grad[c * mb : (c + 1) * mb])))
        self._pump(sim, m)

    def _pump(self, sim, m):
        st = self.state[m]
        while st.pending:
            c, payload = st.pending[0]
            pkt = sim.worker_send(m, payload)
            if pkt is None:
                return
            st.slot_ctx[pkt.seq] = c
            st.pending.popleft()

    def on_fa(self, sim, m, slot, payload):
        st = self.state[m]
        c = st.slot_ctx[slot]
        mb = self.cfg.microbatch
        st.gsum[c * mb : (c + 1) * mb] = np.asarray(payload, dtype=np.int32)
        st.chunks_received += 1
        if st.chunks_received < self.chunks:
            return
        model_update(st.x, st.gsum, self.cfg.minibatch)
        st.chunks_received = 0
        batch = st.batch
        st.batch += 1
        self.ledger.note_update(sim, m, batch)
        if len(self.ledger.update_times.get(batch, ())) == 0:
            # all replicas updated for this batch: record their digests
            self.replica_digests.append(
                tuple(hash(s.x.tobytes()) for s in self.state)
            )
        if st.batch < self.total_batches:
            self._begin_compute(sim, m)

    def on_slot_free(self, sim, m, slot):
        self.state[m].slot_ctx.pop(slot, None)
        self._pump(sim, m)

    def done(self, sim) -> bool:
        return all(st.batch == self.total_batches and not st.pending for st in self.state)


def _run_training(dataset: Dataset, cfg: TrainingConfig, workload, horizon_ns=None):
    if dataset.n_samples % cfg.minibatch:
        raise ConfigError(
            f"mini-batch {cfg.minibatch} must divide sample count {dataset.n_samples}"
        )
    if dataset.loss_kind != cfg.loss_kind:
        raise ConfigError(
            f"dataset quantized for {dataset.loss_kind!r}, config wants {cfg.loss_kind!r}"
        )
    topo = StarTopology(
        n_workers=cfg.n_workers,
        n_slots=cfg.n_slots,
        payload_len=cfg.microbatch,
        proc_ns=cfg.timing.proc_ns,
        ser_ns=cfg.timing.ser_ns,
    )
    sim = Simulator(topo, cfg.fault, workload, collect_events=False, horizon_ns=horizon_ns)
    initial_loss = workload.ledger.loss_fn()
    trace = sim.run()
    rows = workload.ledger.rows
    if rows:
        # acks and confirms of each epoch's last rounds are still in flight
        # when its update lands; the drained run settles them into the final
        # row so the per-epoch columns sum to the exact totals
        seen = workload.ledger._last_counters
        rows[-1]["pkts"] += trace.counters["sent"] - seen["sent"]
        rows[-1]["bytes"] += (trace.counters["sent"] - seen["sent"]) * packet_size(
            cfg.microbatch
        )
        rows[-1]["retx"] += trace.counters["retransmits"] - seen["retransmits"]
    metrics = TrainMetrics(
        initial_loss=initial_loss,
        epoch_rows=workload.ledger.rows,
        counters=trace.counters,
        packet_bytes=packet_size(cfg.microbatch),
        iterations=workload.total_batches,
        iteration_ends_ns=workload.ledger.iteration_ends,
    )
    return metrics


def train_model_parallel(dataset: Dataset, cfg: TrainingConfig, horizon_ns=None):
    """Returns (model, metrics); the model covers the padded feature space."""
    span_w = max(
        b - a
        for a, b in plan_partitions(
            dataset.padded_features, dataset.n_samples, cfg.n_workers, cfg.n_engines, "model"
        ).spans
    )
    timing = _derived_timing(cfg, span_w * cfg.n_engines, dataset.padded_features)
    workload = MPWorkload(dataset, cfg, timing)
    metrics = _run_training(dataset, cfg, workload, horizon_ns)
    return workload.assemble_model(), metrics


def train_data_parallel(dataset: Dataset, cfg: TrainingConfig, horizon_ns=None):
    """Returns (model, metrics); every worker replica ends bit-identical."""
    timing = _derived_timing(cfg, dataset.padded_features, dataset.padded_features)
    workload = DPWorkload(dataset, cfg, timing)
    metrics = _run_training(dataset, cfg, workload, horizon_ns)
    for st in workload.state[1:]:
        if not np.array_equal(st.x, workload.state[0].x):
            raise AssertionError("data-parallel replicas diverged")
    return workload.state[0].x.copy(), metrics


def simulate_iteration_time(
    *,
    forward_dp_ns: float = 0.0,
    backward_dp_ns: float = 0.0,
    forward_mp_ns: float,
    backward_mp_ns: float,
    dim: int = 0,
    minibatch: int,
    microbatch: int,
    bandwidth: float,
    latency_ns: float,
) -> dict:
    """Closed-form per-iteration time for the three training strategies.

    bandwidth is payload words per ns; the communication terms are the
    transferred element count over bandwidth. Data parallelism overlaps
    per-sample backward with forward, exposing only one sample's
    backward; vanilla model parallelism serializes the three stages;
    micro-batched model parallelism hides all but the first forward and
    all but the last micro-batch's wire time.
    """
    b, mb = minibatch, microbatch
    return {
        "dp": forward_dp_ns + backward_dp_ns / b + dim / bandwidth + latency_ns,
        "vanilla_mp": forward_mp_ns + backward_mp_ns + b / bandwidth + latency_ns,
        "pipelined_mp": (mb / b) * forward_mp_ns
        + backward_mp_ns
        + mb / bandwidth
        + latency_ns,
    }
