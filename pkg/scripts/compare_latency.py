#!/usr/bin/env python3
"""AllReduce latency of in-switch vs endhost aggregation across fan-ins."""

import argparse
import sys

from switchsgd.netsim import (
    EndhostTopology,
    FaultModel,
    PumpWorkload,
    Simulator,
    StarTopology,
    measure_allreduce_latency,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=500)
    ap.add_argument("--payload", type=int, default=8)
    ap.add_argument("--latency-ns", type=int, default=500)
    ap.add_argument("--proc-ns", type=int, default=100)
    ap.add_argument("--host-proc-ns", type=int, default=2000)
    ap.add_argument("--jitter-ns", type=int, default=0)
    args = ap.parse_args()

    fault = FaultModel(latency_ns=args.latency_ns, jitter_ns=args.jitter_ns, seed=0)
    print("workers,switch_p50_ns,switch_p99_ns,endhost_p50_ns,endhost_p99_ns,ratio")
    for w in (2, 4, 8, 16, 32):
        row = [w]
        for make in (
            lambda: StarTopology(w, 16, args.payload, proc_ns=args.proc_ns),
            lambda: EndhostTopology(
                w, 16, args.payload, proc_ns=args.proc_ns, host_proc_ns=args.host_proc_ns
            ),
        ):
            sim = Simulator(make(), fault, PumpWorkload(args.rounds), collect_events=False)
            stats = measure_allreduce_latency(sim.run())
            row += [stats["p50"], stats["p99"]]
        row.append(round(row[3] / row[1], 3))
        print(",".join(str(v) for v in row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
