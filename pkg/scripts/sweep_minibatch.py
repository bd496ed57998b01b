#!/usr/bin/env python3
"""Measured vs closed-form iteration time across a (minibatch, microbatch) grid.

Runs the event-driven simulator for pipelined and vanilla model
parallelism in every cell and prints one CSV row per cell with the
matching closed-form predictions. Deviations should be zero when the
backward stage dominates the pipeline.
"""

import argparse
import sys

from switchsgd.ingest import make_blobs, quantize_dense
from switchsgd.netsim import FaultModel
from switchsgd.trainer import TimingParams, TrainingConfig, train_model_parallel

SER, LAT, PROC = 64, 500, 100


def measure(ds, b, mb, pipeline):
    cfg = TrainingConfig(
        n_workers=2,
        minibatch=b,
        microbatch=mb,
        precision=4,
        learning_rate=2**-11,
        epochs=1,
        n_slots=64,
        pipeline=pipeline,
        fault=FaultModel(latency_ns=LAT),
        timing=TimingParams(
            forward_ns=25 * mb, backward_ns=25 * mb + 200, ser_ns=SER, proc_ns=PROC
        ),
    )
    _, metrics = train_model_parallel(ds, cfg)
    gaps = metrics.iteration_gaps_ns
    return sum(gaps) / len(gaps)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=512)
    ap.add_argument("--features", type=int, default=256)
    args = ap.parse_args()

    labels, feats = make_blobs(args.samples, args.features, seed=9)
    ds = quantize_dense(labels, feats, "squared")
    t_link = 2 * LAT + PROC

    print("minibatch,microbatch,pipelined_ns,pipelined_formula_ns,vanilla_ns,vanilla_formula_ns,speedup")
    for b in (32, 64, 128):
        for mb in (4, 8, 16):
            k = b // mb
            t_f, t_b = 25 * mb, 25 * mb + 200
            pipe = measure(ds, b, mb, True)
            vanilla = measure(ds, b, mb, False)
            f_pipe = (mb / b) * k * t_f + k * t_b + SER + t_link
            f_van = k * (t_f + t_b + SER) + t_link
            print(
                f"{b},{mb},{pipe:.1f},{f_pipe:.1f},{vanilla:.1f},{f_van:.1f},"
                f"{vanilla / pipe:.4f}"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
